//! Binary realism scorer: the probability that a (trajectory, mode) pair
//! resembles the training dataset. Trained on the dataset against an equal
//! number of trajectories sampled from the diffusion model, and used to
//! weight particles during search.

use crate::diffusion::DiffusionModel;
use crate::error::{DipsError, Result};
use crate::neural::{
    adam_step, load_checkpoint, save_checkpoint, AdamState, CheckpointHeader, Mlp,
    OutputActivation,
};
use crate::seeding::{derive_seed, stream_rng};
use crate::types::{flatten, ContactMode, Dataset, Dims, NormStats, Trajectory};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: vec![128, 128],
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub net: Mlp,
    pub stats: NormStats,
    pub fingerprint: String,
    pub dims: Dims,
    pub n_modes: usize,
}

impl Discriminator {
    pub fn init(dataset: &Dataset, n_modes: usize, hidden: &[usize], seed: u64) -> Self {
        let d = dataset.dims.flat();
        let mut sizes = vec![d + n_modes];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = stream_rng(seed, &[0x64697363]);
        Discriminator {
            net: Mlp::init(&sizes, OutputActivation::Logistic, &mut rng),
            stats: dataset.stats.clone(),
            fingerprint: dataset.fingerprint.clone(),
            dims: dataset.dims,
            n_modes,
        }
    }

    fn input(&self, traj: &Trajectory, mode_idx: usize) -> Result<Vec<f64>> {
        let flat = flatten(traj, &self.dims)?;
        let mut x = self.stats.normalize(&flat);
        for c in 0..self.n_modes {
            x.push(if c == mode_idx { 1.0 } else { 0.0 });
        }
        Ok(x)
    }

    /// Probability in (0,1) that the trajectory resembles the dataset.
    pub fn score(&self, traj: &Trajectory, mode_idx: usize) -> Result<f64> {
        let x = self.input(traj, mode_idx)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DipsError::NonFinite("discriminator input".into()));
        }
        Ok(self.net.forward_value(&x)?[0])
    }

    pub fn score_batch(&self, trajs: &[Trajectory], mode_idx: usize) -> Result<Vec<f64>> {
        trajs.iter().map(|t| self.score(t, mode_idx)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model_kind: "discriminator".into(),
            layer_sizes: self.net.layer_sizes(),
            hidden_activation: self.net.hidden,
            output_activation: self.net.output,
            task_fingerprint: self.fingerprint.clone(),
            mean: self.stats.mean.clone(),
            std: self.stats.std.clone(),
            extra: serde_json::to_value(DiscriminatorMeta {
                dims: self.dims,
                n_modes: self.n_modes,
            })?,
        };
        save_checkpoint(path, &header, &self.net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, net) = load_checkpoint(path)?;
        if header.model_kind != "discriminator" {
            return Err(DipsError::Config(format!(
                "checkpoint {} holds a `{}` model, expected `discriminator`",
                path.display(),
                header.model_kind
            )));
        }
        let meta: DiscriminatorMeta = serde_json::from_value(header.extra)?;
        Ok(Discriminator {
            net,
            stats: NormStats {
                mean: header.mean,
                std: header.std,
            },
            fingerprint: header.task_fingerprint,
            dims: meta.dims,
            n_modes: meta.n_modes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorMeta {
    dims: Dims,
    n_modes: usize,
}

/// Labelled training pool: dataset entries (label 1) plus an equal number
/// of diffusion samples conditioned on the same (mode, first state) pairs
/// (label 0).
#[derive(Debug)]
pub struct DiscriminatorData {
    pub real: Vec<(Trajectory, usize)>,
    pub fake: Vec<(Trajectory, usize)>,
}

pub fn generate_training_pool(
    dataset: &Dataset,
    model: &DiffusionModel,
    mode_index: impl Fn(&ContactMode) -> usize + Sync,
    seed: u64,
) -> Result<DiscriminatorData> {
    if dataset.fingerprint != model.fingerprint {
        return Err(DipsError::FingerprintMismatch {
            context: "discriminator training pool".into(),
            expected: dataset.fingerprint.clone(),
            actual: model.fingerprint.clone(),
        });
    }
    let real: Vec<(Trajectory, usize)> = dataset
        .entries
        .iter()
        .map(|e| (e.trajectory.clone(), mode_index(&e.mode)))
        .collect();
    let fake: Vec<(Trajectory, usize)> = real
        .par_iter()
        .enumerate()
        .map(|(i, (traj, mi))| {
            let s = derive_seed(seed, &[0xfa4e, i as u64]);
            let sample = model.sample(*mi, traj.first_state(), 1, s);
            (sample.into_iter().next().expect("one sample"), *mi)
        })
        .collect();
    Ok(DiscriminatorData { real, fake })
}

/// Train on a prepared pool with binary cross-entropy (label 1 = real).
pub fn train_on_pool(
    dataset: &Dataset,
    n_modes: usize,
    pool: &DiscriminatorData,
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<(Discriminator, Vec<f64>)> {
    if pool.real.is_empty() || pool.fake.is_empty() {
        return Err(DipsError::EmptyBatch);
    }
    let mut disc = Discriminator::init(dataset, n_modes, &cfg.hidden, seed);
    let mut adam = AdamState::new(&disc.net, cfg.learning_rate);
    let mut rng = stream_rng(seed, &[0x64697363, 1]);
    let half = (cfg.batch_size / 2).max(1);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        // pre-drawn, order-stable batch
        let picks: Vec<(bool, usize)> = (0..2 * half)
            .map(|k| {
                if k < half {
                    (true, rng.gen_range(0..pool.real.len()))
                } else {
                    (false, rng.gen_range(0..pool.fake.len()))
                }
            })
            .collect();
        let inputs: Vec<(Vec<f64>, f64)> = picks
            .iter()
            .map(|&(is_real, idx)| {
                let (traj, mi) = if is_real { &pool.real[idx] } else { &pool.fake[idx] };
                let x = disc.input(traj, *mi)?;
                Ok((x, if is_real { 1.0 } else { 0.0 }))
            })
            .collect::<Result<_>>()?;

        const CHUNKS: usize = 8;
        let chunk_size = inputs.len().div_ceil(CHUNKS);
        let results: Vec<(crate::neural::Gradients, f64)> = inputs
            .par_chunks(chunk_size)
            .map(|chunk| {
                let mut grads = crate::neural::Gradients::zeros_like(&disc.net);
                let mut loss = 0.0;
                for (x, label) in chunk {
                    let (y, cache) = disc.net.forward(x).expect("dims");
                    let p = y[0].clamp(1e-12, 1.0 - 1e-12);
                    loss += -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
                    // d BCE / d p = (p - label) / (p (1 - p)); the logistic
                    // head multiplies by p (1 - p)
                    let dl = (p - label) / (p * (1.0 - p));
                    let g = disc.net.backward(&cache, &[dl]).expect("dims");
                    grads.add_assign(&g);
                }
                (grads, loss)
            })
            .collect();

        let mut grads = crate::neural::Gradients::zeros_like(&disc.net);
        let mut loss = 0.0;
        for (g, l) in &results {
            grads.add_assign(g);
            loss += l;
        }
        grads.scale(1.0 / inputs.len() as f64);
        loss /= inputs.len() as f64;
        adam_step(&mut disc.net, &grads, &mut adam);
        curve.push(loss);
    }
    Ok((disc, curve))
}

/// Full training entry point: build the pool from the diffusion model,
/// then fit the scorer.
pub fn train_discriminator(
    dataset: &Dataset,
    model: &DiffusionModel,
    n_modes: usize,
    mode_index: impl Fn(&ContactMode) -> usize + Sync + Copy,
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<(Discriminator, Vec<f64>)> {
    let pool = generate_training_pool(dataset, model, mode_index, seed)?;
    train_on_pool(dataset, n_modes, &pool, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;
    use crate::domain::{nominal_trajectory, TaskSpec};
    use crate::types::DatasetEntry;

    fn tiny_dataset(task: &TaskSpec, n: usize) -> Dataset {
        let mut entries = Vec::new();
        let mut rng = stream_rng(17, &[3]);
        for k in 0..n {
            let mi = k % task.n_modes();
            let (s0, targets) = task.sample_initial_state(&mut rng, 0.8);
            let traj = nominal_trajectory(task, &targets, mi, &s0);
            entries.push(DatasetEntry {
                trajectory: traj,
                mode: task.modes[mi].mode.clone(),
                low_quality: false,
            });
        }
        Dataset::from_entries(entries, task.dims(), task.fingerprint()).unwrap()
    }

    #[test]
    fn zero_weight_scorer_outputs_exactly_half() {
        let task = TaskSpec::card();
        let ds = tiny_dataset(&task, 6);
        let mut disc = Discriminator::init(&ds, task.n_modes(), &[16], 1);
        for l in &mut disc.net.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        for e in &ds.entries {
            let s = disc.score(&e.trajectory, 0).unwrap();
            assert_eq!(s, 0.5);
        }
    }

    #[test]
    fn scores_are_probabilities_and_pointwise() {
        let task = TaskSpec::rotor();
        let ds = tiny_dataset(&task, 8);
        let disc = Discriminator::init(&ds, task.n_modes(), &[32, 16], 2);
        let trajs: Vec<Trajectory> = ds.entries.iter().map(|e| e.trajectory.clone()).collect();
        let batch = disc.score_batch(&trajs, 1).unwrap();
        for (t, b) in trajs.iter().zip(&batch) {
            let single = disc.score(t, 1).unwrap();
            assert!((single - b).abs() < 1e-12);
            assert!(*b > 0.0 && *b < 1.0);
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let task = TaskSpec::card();
        let ds = tiny_dataset(&task, 4);
        let disc = Discriminator::init(&ds, task.n_modes(), &[16], 3);
        let mut bad = ds.entries[0].trajectory.clone();
        bad.states[3].fingers[0].x = f64::NAN;
        assert!(matches!(
            disc.score(&bad, 0),
            Err(DipsError::NonFinite(_))
        ));
    }

    #[test]
    fn identical_real_and_fake_pools_train_toward_half() {
        // when fake == real, the BCE optimum is 0.5 everywhere
        let task = TaskSpec::card();
        let ds = tiny_dataset(&task, 12);
        let real: Vec<(Trajectory, usize)> = ds
            .entries
            .iter()
            .map(|e| (e.trajectory.clone(), task.mode_index(&e.mode).unwrap()))
            .collect();
        let pool = DiscriminatorData {
            fake: real.clone(),
            real,
        };
        let cfg = DiscriminatorConfig {
            hidden: vec![32],
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
        };
        let (disc, _) = train_on_pool(&ds, task.n_modes(), &pool, &cfg, 5).unwrap();
        let mut mean = 0.0;
        for (t, mi) in &pool.real {
            mean += disc.score(t, *mi).unwrap();
        }
        mean /= pool.real.len() as f64;
        assert!(
            (0.4..=0.6).contains(&mean),
            "mean score on indistinguishable classes: {mean}"
        );
    }

    #[test]
    fn separates_real_from_untrained_model_samples() {
        // an untrained diffusion model produces noise-like samples; after
        // training, held-out real should outscore held-out fake
        let task = TaskSpec::card();
        let ds = tiny_dataset(&task, 40);
        let dconf = DiffusionConfig {
            hidden: vec![24],
            ..DiffusionConfig::default()
        };
        let model = crate::diffusion::DiffusionModel::init(&ds, task.n_modes(), dconf, 6);
        let pool = generate_training_pool(&ds, &model, |m| task.mode_index(m).unwrap(), 7).unwrap();
        let n_hold = 4;
        let train_pool = DiscriminatorData {
            real: pool.real[..pool.real.len() - n_hold].to_vec(),
            fake: pool.fake[..pool.fake.len() - n_hold].to_vec(),
        };
        let cfg = DiscriminatorConfig {
            hidden: vec![32],
            steps: 300,
            batch_size: 32,
            learning_rate: 1e-3,
        };
        let (disc, curve) = train_on_pool(&ds, task.n_modes(), &train_pool, &cfg, 8).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let mean = |set: &[(Trajectory, usize)]| -> f64 {
            set.iter()
                .map(|(t, mi)| disc.score(t, *mi).unwrap())
                .sum::<f64>()
                / set.len() as f64
        };
        let real_mean = mean(&pool.real[pool.real.len() - n_hold..]);
        let fake_mean = mean(&pool.fake[pool.fake.len() - n_hold..]);
        assert!(
            real_mean >= fake_mean,
            "held-out real {real_mean} vs fake {fake_mean}"
        );
    }

    #[test]
    fn fingerprint_mismatch_is_an_error() {
        let card = TaskSpec::card();
        let rotor = TaskSpec::rotor();
        let ds_card = tiny_dataset(&card, 4);
        let ds_rotor = tiny_dataset(&rotor, 4);
        let model = crate::diffusion::DiffusionModel::init(
            &ds_rotor,
            rotor.n_modes(),
            DiffusionConfig {
                hidden: vec![8],
                ..DiffusionConfig::default()
            },
            9,
        );
        let err =
            generate_training_pool(&ds_card, &model, |m| card.mode_index(m).unwrap(), 1).unwrap_err();
        assert!(matches!(err, DipsError::FingerprintMismatch { .. }));
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_roundtrips() {
        let task = TaskSpec::rotor();
        let ds = tiny_dataset(&task, 10);
        let real: Vec<(Trajectory, usize)> = ds
            .entries
            .iter()
            .map(|e| (e.trajectory.clone(), task.mode_index(&e.mode).unwrap()))
            .collect();
        let mut fake = real.clone();
        for (t, _) in &mut fake {
            for s in &mut t.states {
                for q in &mut s.fingers {
                    q.x += 0.01;
                }
            }
        }
        let pool = DiscriminatorData { real, fake };
        let cfg = DiscriminatorConfig {
            hidden: vec![16],
            steps: 50,
            batch_size: 16,
            learning_rate: 1e-3,
        };
        let (d1, c1) = train_on_pool(&ds, task.n_modes(), &pool, &cfg, 11).unwrap();
        let (d2, c2) = train_on_pool(&ds, task.n_modes(), &pool, &cfg, 11).unwrap();
        assert_eq!(c1, c2);
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        d1.net.write_params(&mut p1);
        d2.net.write_params(&mut p2);
        assert_eq!(p1, p2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disc.ckpt");
        d1.save(&path).unwrap();
        let loaded = Discriminator::load(&path).unwrap();
        let t = &pool.real[0];
        assert_eq!(d1.score(&t.0, t.1).unwrap(), loaded.score(&t.0, t.1).unwrap());
    }
}
