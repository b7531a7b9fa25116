//! Conditional denoising diffusion over flattened trajectories.
//!
//! The noise predictor is an MLP over
//! `[x_t | timestep embedding | mode one-hot (+ null) | mask | masked known values]`.
//! Training drops the condition with probability 0.1 (classifier-free
//! guidance) and draws random inpainting masks; the loss is epsilon-MSE on
//! unknown entries only. Sampling runs the ancestral chain with guided
//! noise `(1 + w) eps_cond - w eps_uncond`, clamping the first-state block
//! to the conditioning state after every step.

use crate::error::{DipsError, Result};
use crate::neural::{
    adam_step, load_checkpoint, normal_vec, save_checkpoint, AdamState, CheckpointHeader, Mlp,
    OutputActivation,
};
use crate::seeding::{derive_seed, stream_rng};
use crate::types::{flatten, unflatten, ContactMode, Dataset, Dims, NormStats, State, Trajectory};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Linear-beta noise schedule with cumulative products.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(n_steps: usize, beta_min: f64, beta_max: f64) -> Self {
        assert!(n_steps >= 1);
        let betas: Vec<f64> = (0..n_steps)
            .map(|i| {
                if n_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (n_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(n_steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product of (1 - beta) up to step `t` (1-based); `t = 0`
    /// returns 1 (the no-noise limit).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub hidden: Vec<usize>,
    pub t_embed_dim: usize,
    pub guidance_weight: f64,
    pub cond_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            n_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            hidden: vec![256, 256, 256],
            t_embed_dim: 32,
            guidance_weight: 1.5,
            cond_dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub net: Mlp,
    pub stats: NormStats,
    pub fingerprint: String,
    pub dims: Dims,
    pub n_modes: usize,
    pub config: DiffusionConfig,
}

/// Forward noising `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn noising(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect()
}

/// Sinusoidal timestep embedding.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out.truncate(dim);
    out
}

/// Per-sample training randomness, pre-drawn sequentially so batch
/// processing can run in parallel without changing results.
struct SampleDraw {
    entry: usize,
    t: usize,
    eps: Vec<f64>,
    cond: usize,
    mask: Vec<f64>,
}

impl DiffusionModel {
    pub fn init(dataset: &Dataset, n_modes: usize, config: DiffusionConfig, seed: u64) -> Self {
        let dims = dataset.dims;
        let d = dims.flat();
        let input_dim = 3 * d + config.t_embed_dim + n_modes + 1;
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(d);
        let mut rng = stream_rng(seed, &[0x6d6f64656c]);
        let net = Mlp::init(&sizes, OutputActivation::Identity, &mut rng);
        DiffusionModel {
            schedule: NoiseSchedule::linear(config.n_steps, config.beta_min, config.beta_max),
            net,
            stats: dataset.stats.clone(),
            fingerprint: dataset.fingerprint.clone(),
            dims,
            n_modes,
            config,
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.dims.flat()
    }

    /// Index of the classifier-free null condition token.
    pub fn null_cond(&self) -> usize {
        self.n_modes
    }

    pub fn normalize(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        Ok(self.stats.normalize(&flatten(traj, &self.dims)?))
    }

    pub fn denormalize(&self, v: &[f64]) -> Result<Trajectory> {
        unflatten(&self.stats.denormalize(v), &self.dims)
    }

    fn assemble_input(&self, x: &[f64], t: usize, cond: usize, mask: &[f64], known: &[f64]) -> Vec<f64> {
        let d = self.flat_dim();
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(x);
        input.extend(timestep_embedding(t, self.config.t_embed_dim));
        for c in 0..self.n_modes + 1 {
            input.push(if c == cond { 1.0 } else { 0.0 });
        }
        input.extend_from_slice(mask);
        input.extend_from_slice(known);
        debug_assert_eq!(input.len(), 3 * d + self.config.t_embed_dim + self.n_modes + 1);
        input
    }

    /// Predicted noise for a (possibly clamped) state `x` at step `t`.
    fn predict(&self, x: &[f64], t: usize, cond: usize, mask: &[f64], known: &[f64]) -> Vec<f64> {
        let input = self.assemble_input(x, t, cond, mask, known);
        self.net.forward_value(&input).expect("input dims match")
    }

    fn draw_mask(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let d = self.flat_dim();
        let dims = &self.dims;
        let mut mask = vec![0.0; d];
        if rng.gen::<f64>() < 0.5 {
            return mask; // empty mask: plain denoising sample
        }
        for k in 0..dims.d_s() {
            mask[k] = 1.0;
        }
        let a = rng.gen_range(0..dims.h);
        let b = rng.gen_range(a..dims.h);
        for t in a..=b {
            let off = dims.step_offset(t);
            for k in 0..dims.per_step() {
                mask[off + k] = 1.0;
            }
        }
        mask
    }

    /// One training step on a batch of (trajectory, mode) pairs: draw
    /// timesteps, noise, condition dropout and inpainting masks; epsilon-MSE
    /// on unknown entries; one Adam update. Returns the loss.
    pub fn train_step(
        &mut self,
        batch: &[(&Trajectory, &ContactMode)],
        mode_index: impl Fn(&ContactMode) -> usize,
        adam: &mut AdamState,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(DipsError::EmptyBatch);
        }
        let d = self.flat_dim();
        let n = self.schedule.n_steps();

        let x0s: Vec<Vec<f64>> = batch
            .iter()
            .map(|(traj, _)| self.normalize(traj))
            .collect::<Result<_>>()?;

        let mut draws = Vec::with_capacity(batch.len());
        for (i, (_, mode)) in batch.iter().enumerate() {
            let t = rng.gen_range(1..=n);
            let eps = normal_vec(rng, d);
            let cond = if rng.gen::<f64>() < self.config.cond_dropout {
                self.null_cond()
            } else {
                mode_index(mode)
            };
            let mask = self.draw_mask(rng);
            draws.push(SampleDraw {
                entry: i,
                t,
                eps,
                cond,
                mask,
            });
        }

        let total_unknown: usize = draws
            .iter()
            .map(|s| s.mask.iter().filter(|&&m| m == 0.0).count())
            .sum();
        if total_unknown == 0 {
            // every entry known in every sample: loss is defined as zero
            return Ok(0.0);
        }
        let inv_total = 1.0 / total_unknown as f64;

        // fixed chunk count keeps the f64 summation order independent of
        // the worker count
        const CHUNKS: usize = 8;
        let chunk_size = draws.len().div_ceil(CHUNKS);
        let results: Vec<(crate::neural::Gradients, f64)> = draws
            .par_chunks(chunk_size)
            .map(|chunk| {
                let mut grads = crate::neural::Gradients::zeros_like(&self.net);
                let mut loss = 0.0;
                for s in chunk {
                    let x0 = &x0s[s.entry];
                    let xt = noising(&self.schedule, x0, s.t, &s.eps);
                    let mut x_in = xt;
                    let mut known = vec![0.0; d];
                    for j in 0..d {
                        if s.mask[j] == 1.0 {
                            x_in[j] = x0[j];
                            known[j] = x0[j];
                        }
                    }
                    let input = self.assemble_input(&x_in, s.t, s.cond, &s.mask, &known);
                    let (pred, cache) = self.net.forward(&input).expect("dims");
                    let mut dl = vec![0.0; d];
                    for j in 0..d {
                        if s.mask[j] == 0.0 {
                            let diff = pred[j] - s.eps[j];
                            loss += diff * diff * inv_total;
                            dl[j] = 2.0 * diff * inv_total;
                        }
                    }
                    let g = self.net.backward(&cache, &dl).expect("dims");
                    grads.add_assign(&g);
                }
                (grads, loss)
            })
            .collect();

        let mut grads = crate::neural::Gradients::zeros_like(&self.net);
        let mut loss = 0.0;
        for (g, l) in &results {
            grads.add_assign(g);
            loss += l;
        }
        adam_step(&mut self.net, &grads, adam);
        Ok(loss)
    }

    /// Sample `count` trajectories conditioned on a mode and a first state.
    /// Each sample consumes an independent substream of `seed`, so results
    /// do not depend on evaluation parallelism. Returned trajectories are
    /// denormalized; their first state equals `s0` up to normalization
    /// round-trip error.
    pub fn sample(&self, mode_idx: usize, s0: &State, count: usize, seed: u64) -> Vec<Trajectory> {
        let d = self.flat_dim();
        let d_s = self.dims.d_s();
        let w = self.config.guidance_weight;
        let n = self.schedule.n_steps();

        let mut s0_raw = vec![0.0; d_s];
        s0.write_into(&mut s0_raw);
        let s0_norm = self.stats.normalize_block(&s0_raw, 0);

        let mut mask = vec![0.0; d];
        let mut known = vec![0.0; d];
        for k in 0..d_s {
            mask[k] = 1.0;
            known[k] = s0_norm[k];
        }

        let seeds: Vec<u64> = (0..count).map(|j| derive_seed(seed, &[j as u64])).collect();
        seeds
            .par_iter()
            .map(|&sj| {
                let mut rng = ChaCha12Rng::seed_from_u64_compat(sj);
                let mut x = normal_vec(&mut rng, d);
                clamp_block(&mut x, &s0_norm);
                for t in (1..=n).rev() {
                    let eps_hat = if w == 0.0 {
                        self.predict(&x, t, mode_idx, &mask, &known)
                    } else {
                        let e_c = self.predict(&x, t, mode_idx, &mask, &known);
                        let e_u = self.predict(&x, t, self.null_cond(), &mask, &known);
                        e_c.iter()
                            .zip(&e_u)
                            .map(|(c, u)| (1.0 + w) * c - w * u)
                            .collect()
                    };
                    let beta = self.schedule.betas[t - 1];
                    let alpha = 1.0 - beta;
                    let ab_t = self.schedule.alpha_bar(t);
                    let ab_prev = self.schedule.alpha_bar(t - 1);
                    let coeff = beta / (1.0 - ab_t).sqrt();
                    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
                    // posterior variance (fixed-small)
                    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
                    let noise = if t > 1 {
                        normal_vec(&mut rng, d)
                    } else {
                        vec![0.0; d]
                    };
                    for j in 0..d {
                        let mean = inv_sqrt_alpha * (x[j] - coeff * eps_hat[j]);
                        x[j] = mean + sigma * noise[j];
                    }
                    clamp_block(&mut x, &s0_norm);
                }
                self.denormalize(&x).expect("sample dims")
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model_kind: "diffusion".into(),
            layer_sizes: self.net.layer_sizes(),
            hidden_activation: self.net.hidden,
            output_activation: self.net.output,
            task_fingerprint: self.fingerprint.clone(),
            mean: self.stats.mean.clone(),
            std: self.stats.std.clone(),
            extra: serde_json::to_value(DiffusionMeta {
                dims: self.dims,
                n_modes: self.n_modes,
                config: self.config.clone(),
            })?,
        };
        save_checkpoint(path, &header, &self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, net) = load_checkpoint(path)?;
        if header.model_kind != "diffusion" {
            return Err(DipsError::Config(format!(
                "checkpoint {} holds a `{}` model, expected `diffusion`",
                path.display(),
                header.model_kind
            )));
        }
        let meta: DiffusionMeta = serde_json::from_value(header.extra)?;
        Ok(DiffusionModel {
            schedule: NoiseSchedule::linear(meta.config.n_steps, meta.config.beta_min, meta.config.beta_max),
            net,
            stats: NormStats {
                mean: header.mean,
                std: header.std,
            },
            fingerprint: header.task_fingerprint,
            dims: meta.dims,
            n_modes: meta.n_modes,
            config: meta.config,
        })
    }
}

fn clamp_block(x: &mut [f64], block: &[f64]) {
    x[..block.len()].copy_from_slice(block);
}

#[derive(Serialize, Deserialize)]
struct DiffusionMeta {
    dims: Dims,
    n_modes: usize,
    config: DiffusionConfig,
}

trait SeedCompat {
    fn seed_from_u64_compat(seed: u64) -> Self;
}

impl SeedCompat for ChaCha12Rng {
    fn seed_from_u64_compat(seed: u64) -> Self {
        use rand_chacha::rand_core::SeedableRng;
        ChaCha12Rng::seed_from_u64(seed)
    }
}

/// Train a diffusion model on a dataset; returns the model and the per-step
/// loss curve.
pub fn train_diffusion(
    dataset: &Dataset,
    n_modes: usize,
    mode_index: impl Fn(&ContactMode) -> usize + Copy,
    config: DiffusionConfig,
    steps: usize,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(DipsError::EmptyBatch);
    }
    let mut model = DiffusionModel::init(dataset, n_modes, config, seed);
    let mut adam = AdamState::new(&model.net, model.config.learning_rate);
    let mut rng = stream_rng(seed, &[0x747261696e]);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<(&Trajectory, &ContactMode)> = (0..model.config.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..dataset.len());
                let e = &dataset.entries[i];
                (&e.trajectory, &e.mode)
            })
            .collect();
        let loss = model.train_step(&batch, mode_index, &mut adam, &mut rng)?;
        curve.push(loss);
    }
    Ok((model, curve))
}
