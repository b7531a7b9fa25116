//! Constrained trajectory optimization for a single contact mode.
//!
//! Implements the segment problem: minimize goal + regrasp + smoothness +
//! force costs subject to contact, sticking-kinematics, quasi-static
//! balance, friction-cone, regrasp-clearance and control-consistency
//! constraints. Solved with projected gradient descent on an augmented
//! Lagrangian: equalities carry multipliers with quadratic penalty,
//! inequalities use the Powell-Hestenes-Rockafellar hinge form, and box /
//! workspace bounds are enforced by projection.

mod constraints;
mod cost;
mod solver;

pub use constraints::{bound_residuals, constraint_residuals, penalty_objective, ConstraintCounts};
pub use cost::total_cost;
pub use solver::{optimize, OptReport};

use crate::domain::{ModeGoal, RegraspTargets, TaskSpec};
use crate::geom::Vec2;
use crate::types::{ContactMode, Control, ObjectPose, State, Trajectory};
use serde::{Deserialize, Serialize};

/// Optimizer configuration. Weights and schedules are shared by both tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptConfig {
    /// Outer (multiplier/penalty) iterations.
    pub outer_iters: usize,
    /// Gradient steps per outer iteration.
    pub inner_steps: usize,
    /// Initial step size; halved by backtracking.
    pub step_size: f64,
    /// Maximum step halvings per gradient step.
    pub max_halvings: usize,
    /// Initial penalty weight.
    pub rho0: f64,
    /// Penalty growth per outer iteration.
    pub rho_growth: f64,
    /// Penalty cap (keeps gradient steps stable; multipliers do the rest).
    pub rho_max: f64,
    /// Heavy-ball momentum on the preconditioned gradient, reset on
    /// backtracking; the consistency/kinematics chains are ill-conditioned
    /// for plain gradient descent.
    pub momentum: f64,
    /// Feasibility tolerance on constraint residuals.
    pub tolerance: f64,
    pub w_goal: f64,
    pub w_regrasp: f64,
    pub w_smooth: f64,
    pub w_force: f64,
    /// Inequality tightening applied to clearance rows inside the solver
    /// so reported residuals sit strictly inside the feasible side.
    pub clearance_margin: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            outer_iters: 8,
            inner_steps: 50,
            step_size: 1e-2,
            max_halvings: 20,
            rho0: 10.0,
            rho_growth: 2.0,
            rho_max: 1e5,
            momentum: 0.85,
            tolerance: 1e-3,
            w_goal: 100.0,
            w_regrasp: 50.0,
            w_smooth: 1.0,
            w_force: 0.1,
            clearance_margin: 1e-4,
        }
    }
}

impl OptConfig {
    /// Data-generation budget: twice the outer iterations of the runtime
    /// default.
    pub fn high_budget(&self) -> Self {
        OptConfig {
            outer_iters: self.outer_iters * 2,
            ..self.clone()
        }
    }
}

/// Everything that defines one segment problem: the task, the episode's
/// regrasp targets and the contact mode under optimization.
#[derive(Clone, Copy)]
pub struct ModeProblem<'a> {
    pub task: &'a TaskSpec,
    pub targets: &'a RegraspTargets,
    pub mode_idx: usize,
}

impl<'a> ModeProblem<'a> {
    pub fn new(task: &'a TaskSpec, targets: &'a RegraspTargets, mode_idx: usize) -> Self {
        ModeProblem {
            task,
            targets,
            mode_idx,
        }
    }

    pub fn mode(&self) -> &'a ContactMode {
        &self.task.modes[self.mode_idx].mode
    }

    pub fn goal(&self) -> &'a ModeGoal {
        &self.task.modes[self.mode_idx].goal
    }

    /// Clearance rows apply for steps `pad .. H-1-pad` (0-based); liftoff
    /// and touchdown each get `pad = ceil(delta / dq_max)` steps, the
    /// minimum the per-step displacement bound allows.
    pub fn clearance_pad(&self) -> usize {
        (self.task.delta / self.task.dq_max).ceil() as usize
    }
}

/// Trajectory partition by contact mode: contact fingers, regrasping
/// fingers, and the object/environment channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedTrajectory {
    pub contact_fingers: Vec<usize>,
    pub regrasp_fingers: Vec<usize>,
    /// Per step: (q, dq, f) for each contact finger, in `contact_fingers` order.
    pub contact: Vec<Vec<(Vec2, Vec2, Vec2)>>,
    /// Per step: (q, dq) for each regrasping finger (no contact force).
    pub regrasp: Vec<Vec<(Vec2, Vec2)>>,
    /// Per step: object pose and environment wrench.
    pub object: Vec<(ObjectPose, Vec<f64>)>,
}

/// Split a trajectory into contact / regrasp / object parts.
pub fn partition(traj: &Trajectory, mode: &ContactMode) -> PartitionedTrajectory {
    let contact_fingers: Vec<usize> = mode.contact_fingers().collect();
    let regrasp_fingers: Vec<usize> = mode.regrasp_fingers().collect();
    let mut contact = Vec::with_capacity(traj.horizon());
    let mut regrasp = Vec::with_capacity(traj.horizon());
    let mut object = Vec::with_capacity(traj.horizon());
    for (s, u) in traj.states.iter().zip(&traj.controls) {
        contact.push(
            contact_fingers
                .iter()
                .map(|&i| (s.fingers[i], u.dq[i], u.f[i]))
                .collect(),
        );
        regrasp.push(
            regrasp_fingers
                .iter()
                .map(|&i| (s.fingers[i], u.dq[i]))
                .collect(),
        );
        object.push((s.object, u.env.clone()));
    }
    PartitionedTrajectory {
        contact_fingers,
        regrasp_fingers,
        contact,
        regrasp,
        object,
    }
}

/// Inverse of [`partition`]. Regrasping fingers carry zero contact force.
pub fn reassemble(part: &PartitionedTrajectory) -> Trajectory {
    let n_f = part.contact_fingers.len() + part.regrasp_fingers.len();
    let h = part.object.len();
    let mut states = Vec::with_capacity(h);
    let mut controls = Vec::with_capacity(h);
    for t in 0..h {
        let mut fingers = vec![Vec2::ZERO; n_f];
        let mut dq = vec![Vec2::ZERO; n_f];
        let mut f = vec![Vec2::ZERO; n_f];
        for (k, &i) in part.contact_fingers.iter().enumerate() {
            let (q, d, force) = part.contact[t][k];
            fingers[i] = q;
            dq[i] = d;
            f[i] = force;
        }
        for (k, &i) in part.regrasp_fingers.iter().enumerate() {
            let (q, d) = part.regrasp[t][k];
            fingers[i] = q;
            dq[i] = d;
        }
        let (object, env) = part.object[t].clone();
        states.push(State { fingers, object });
        controls.push(Control { dq, f, env });
    }
    Trajectory { states, controls }
}

/// Flat-vector layout helpers for the decision variables.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub dims: crate::types::Dims,
}

impl Layout {
    pub fn new(task: &TaskSpec) -> Self {
        Layout { dims: task.dims() }
    }

    pub fn flat(&self) -> usize {
        self.dims.flat()
    }

    /// Finger position (x, y) indices at step `t`.
    pub fn q(&self, t: usize, finger: usize) -> (usize, usize) {
        let b = self.dims.step_offset(t) + 2 * finger;
        (b, b + 1)
    }

    /// Object pose coordinate index at step `t`.
    pub fn obj(&self, t: usize, k: usize) -> usize {
        self.dims.step_offset(t) + 2 * self.dims.n_f + k
    }

    pub fn dq(&self, t: usize, finger: usize) -> (usize, usize) {
        let b = self.dims.step_offset(t) + self.dims.d_s() + 4 * finger;
        (b, b + 1)
    }

    pub fn f(&self, t: usize, finger: usize) -> (usize, usize) {
        let b = self.dims.step_offset(t) + self.dims.d_s() + 4 * finger + 2;
        (b, b + 1)
    }

    pub fn env(&self, t: usize, k: usize) -> usize {
        self.dims.step_offset(t) + self.dims.d_s() + 4 * self.dims.n_f + k
    }

    pub fn state_at(&self, z: &[f64], t: usize) -> State {
        let off = self.dims.step_offset(t);
        State::from_slice(&self.dims, &z[off..off + self.dims.d_s()])
    }
}
