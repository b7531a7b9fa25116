//! Contact-sequence planning for planar multi-finger toy manipulation.
//!
//! The crate combines four pieces:
//!
//! - an A* search over discrete contact-mode sequences whose edges are
//!   evaluated with a learned trajectory proposal model ([`search`]),
//! - a conditional denoising diffusion model over flattened trajectories
//!   with classifier-free guidance and first-state inpainting ([`diffusion`]),
//! - a discriminator that scores trajectory realism and supplies particle
//!   weights for variability propagation ([`discriminator`]),
//! - a penalty/augmented-Lagrangian trajectory optimizer that turns planned
//!   modes into executable motions ([`trajopt`]).
//!
//! Two analytic quasi-static tasks are built in ([`domain`]): sliding a card
//! along a table edge with two fingers, and turning a pinned rotor with
//! three fingers whose angular workspaces force finger gaiting.
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release -p dips --example simulate_gait
//! cargo run --release -p dips --example optimize_segment
//! cargo run --release -p dips --example plan_with_stub
//! cargo run --release -p dips --example generate_data
//! cargo run --release -p dips --example train_diffusion
//! cargo run --release -p dips --example train_discriminator
//! cargo run --release -p dips --example end_to_end
//! ```
//!
//! The `dips` binary exposes the same pipeline as subcommands
//! (`gen-data`, `train`, `run`); see the crate README.

pub mod cli;
pub mod diffusion;
pub mod discriminator;
pub mod domain;
pub mod error;
pub mod geom;
pub mod neural;
pub mod pipeline;
pub mod search;
pub mod seeding;
pub mod trajopt;
pub mod types;

pub use error::{DipsError, Result};
