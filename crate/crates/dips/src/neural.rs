//! Dense-network substrate: a multilayer perceptron with explicit
//! backpropagation and an Adam optimizer, shared by the diffusion noise
//! predictor and the discriminator. No autodiff graph; gradients are
//! hand-derived and finite-difference checked.

use crate::error::{DipsError, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    /// Smooth rectifier ln(1 + e^x).
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Logistic,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer; weights are row-major `(n_out, n_in)`.
#[derive(Clone, Debug)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

/// Pre- and post-activation values from a forward pass, consumed by
/// `backward`.
pub struct Cache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

/// Parameter gradients shaped like the network.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, x) in w.iter_mut().zip(ow) {
                *a += x;
            }
            for (a, x) in b.iter_mut().zip(ob) {
                *a += x;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for a in w.iter_mut() {
                *a *= s;
            }
            for a in b.iter_mut() {
                *a *= s;
            }
        }
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// He-initialized network. `sizes` chains input through hidden layers to
    /// the output dimension.
    pub fn init(sizes: &[usize], output: OutputActivation, rng: &mut ChaCha12Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for win in sizes.windows(2) {
            let (n_in, n_out) = (win[0], win[1]);
            let scale = (2.0 / n_in as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| standard_normal(rng) * scale)
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; n_out],
                n_in,
                n_out,
            });
        }
        Mlp {
            layers,
            hidden: HiddenActivation::Softplus,
            output,
        }
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Self {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for win in sizes.windows(2) {
            layers.push(Layer {
                w: vec![0.0; win[0] * win[1]],
                b: vec![0.0; win[1]],
                n_in: win[0],
                n_out: win[1],
            });
        }
        Mlp {
            layers,
            hidden: HiddenActivation::Softplus,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("nonempty").n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").n_out
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
        if x.len() != self.input_dim() {
            return Err(DipsError::Dimension {
                what: "mlp input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers);
        let mut a = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = 0.0;
                for (wv, av) in row.iter().zip(&a) {
                    acc += wv * av;
                }
                *zo += acc;
            }
            let act: Vec<f64> = if li + 1 == n_layers {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Logistic => z.iter().map(|&v| logistic(v)).collect(),
                }
            } else {
                z.iter().map(|&v| softplus(v)).collect()
            };
            pre.push(z);
            post.push(act.clone());
            a = act;
        }
        Ok((
            a,
            Cache {
                input: x.to_vec(),
                pre,
                post,
            },
        ))
    }

    pub fn forward_value(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse-mode gradients of the forward map composed with `dl_dy`.
    pub fn backward(&self, cache: &Cache, dl_dy: &[f64]) -> Result<Gradients> {
        if dl_dy.len() != self.output_dim() {
            return Err(DipsError::Dimension {
                what: "mlp output gradient",
                expected: self.output_dim(),
                actual: dl_dy.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut grads = Gradients::zeros_like(self);

        // delta at the output layer
        let last_pre = &cache.pre[n_layers - 1];
        let mut delta: Vec<f64> = match self.output {
            OutputActivation::Identity => dl_dy.to_vec(),
            OutputActivation::Logistic => {
                let last_post = &cache.post[n_layers - 1];
                dl_dy
                    .iter()
                    .zip(last_post)
                    .map(|(g, &p)| g * p * (1.0 - p))
                    .collect()
            }
        };
        debug_assert_eq!(last_pre.len(), delta.len());

        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let a_prev: &[f64] = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            let (dw, db) = &mut grads.layers[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                db[o] += d;
                let row = &mut dw[o * layer.n_in..(o + 1) * layer.n_in];
                for (rv, av) in row.iter_mut().zip(a_prev) {
                    *rv += d * av;
                }
            }
            if li > 0 {
                let mut da = vec![0.0; layer.n_in];
                for o in 0..layer.n_out {
                    let d = delta[o];
                    let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (dav, wv) in da.iter_mut().zip(row) {
                        *dav += d * wv;
                    }
                }
                // softplus'(z) = logistic(z)
                let z_prev = &cache.pre[li - 1];
                delta = da
                    .iter()
                    .zip(z_prev)
                    .map(|(dav, &z)| dav * logistic(z))
                    .collect();
            }
        }
        Ok(grads)
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    pub fn read_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DipsError::Dimension {
                what: "mlp parameters",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; consumes two uniforms deterministically
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw a standard-normal vector.
pub fn normal_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Bias-corrected adaptive-moment state over the flattened parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; mlp.param_count()],
            v: vec![0.0; mlp.param_count()],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(mlp: &mut Mlp, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let g = grads.flat();
    debug_assert_eq!(g.len(), state.m.len());
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let mut update = vec![0.0; g.len()];
    for i in 0..g.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        update[i] = state.lr * mhat / (vhat.sqrt() + state.eps);
    }
    let mut i = 0;
    for l in &mut mlp.layers {
        for wv in l.w.iter_mut() {
            *wv -= update[i];
            i += 1;
        }
        for bv in l.b.iter_mut() {
            *bv -= update[i];
            i += 1;
        }
    }
}

/// Checkpoint header; the parameter block follows as little-endian f64 in
/// layer declaration order (weights row-major, then biases).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_kind: String,
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub task_fingerprint: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Model-specific metadata (noise schedule, conditioning sizes, ...).
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, mlp: &Mlp) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut params = Vec::with_capacity(mlp.param_count());
    mlp.write_params(&mut params);
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Mlp)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut mlp = Mlp::zeros(&header.layer_sizes, header.output_activation);
    mlp.hidden = header.hidden_activation;
    let mut params = vec![0.0f64; mlp.param_count()];
    let mut buf = [0u8; 8];
    for p in params.iter_mut() {
        f.read_exact(&mut buf)?;
        *p = f64::from_le_bytes(buf);
    }
    // no trailing data expected
    let mut extra_byte = [0u8; 1];
    if f.read(&mut extra_byte)? != 0 {
        return Err(DipsError::MissingStats(format!(
            "checkpoint {} has trailing bytes",
            path.display()
        )));
    }
    mlp.read_params(&params)?;
    Ok((header, mlp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;
    use approx::assert_relative_eq;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[4, 8, 3], OutputActivation::Identity);
        let (y, _) = mlp.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap();
        // hidden softplus of 0 is ln 2, but weights into the output are 0
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut mlp = Mlp::zeros(&[3, 3], OutputActivation::Identity);
        for i in 0..3 {
            mlp.layers[0].w[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0];
        let (y, _) = mlp.forward(&x).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mlp = Mlp::zeros(&[4, 2], OutputActivation::Identity);
        assert!(mlp.forward(&[1.0, 2.0]).is_err());
        let (_, cache) = mlp.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(mlp.backward(&cache, &[1.0]).is_err());
    }

    /// Straight-line re-evaluation oracle, written independently of
    /// `Mlp::forward`.
    fn forward_oracle(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.to_vec();
        for (li, l) in mlp.layers.iter().enumerate() {
            let mut out = vec![0.0; l.n_out];
            for o in 0..l.n_out {
                let mut z = l.b[o];
                for i in 0..l.n_in {
                    z += l.w[o * l.n_in + i] * a[i];
                }
                out[o] = if li + 1 == mlp.layers.len() {
                    match mlp.output {
                        OutputActivation::Identity => z,
                        OutputActivation::Logistic => 1.0 / (1.0 + (-z).exp()),
                    }
                } else {
                    (1.0 + z.exp()).ln()
                };
            }
            a = out;
        }
        a
    }

    #[test]
    fn forward_matches_independent_re_evaluation() {
        let mut rng = stream_rng(31, &[0]);
        for output in [OutputActivation::Identity, OutputActivation::Logistic] {
            let mlp = Mlp::init(&[6, 16, 16, 4], output, &mut rng);
            for _ in 0..10 {
                let x = normal_vec(&mut rng, 6);
                let (y, _) = mlp.forward(&x).unwrap();
                let o = forward_oracle(&mlp, &x);
                for (a, b) in y.iter().zip(&o) {
                    assert_relative_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = stream_rng(32, &[0]);
        let mlp = Mlp::init(&[5, 8, 2], OutputActivation::Identity, &mut rng);
        let x = normal_vec(&mut rng, 5);
        let (_, cache) = mlp.forward(&x).unwrap();
        let g = mlp.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_chain_rule() {
        let mut mlp = Mlp::zeros(&[1, 1], OutputActivation::Identity);
        mlp.layers[0].w[0] = 3.0;
        let (_, cache) = mlp.forward(&[2.0]).unwrap();
        let g = mlp.backward(&cache, &[5.0]).unwrap();
        // dL/dw = dL/dy * x
        assert_eq!(g.layers[0].0[0], 10.0);
        assert_eq!(g.layers[0].1[0], 5.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(33, &[0]);
        for output in [OutputActivation::Identity, OutputActivation::Logistic] {
            let mlp = Mlp::init(&[4, 10, 7, 3], output, &mut rng);
            let x = normal_vec(&mut rng, 4);
            let dl_dy = normal_vec(&mut rng, 3);
            let (_, cache) = mlp.forward(&x).unwrap();
            let grads = mlp.backward(&cache, &dl_dy).unwrap().flat();

            // L(theta) = dl_dy . y(theta); central differences over a sample
            let loss = |m: &Mlp| -> f64 {
                let (y, _) = m.forward(&x).unwrap();
                y.iter().zip(&dl_dy).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            let mut diff_sq = 0.0;
            let mut fd_sq = 0.0;
            let n = mlp.param_count();
            for idx in (0..n).step_by(11) {
                let mut flat = Vec::with_capacity(n);
                mlp.write_params(&mut flat);
                let mut mp = mlp.clone();
                let mut mm = mlp.clone();
                let mut fp = flat.clone();
                let mut fm = flat;
                fp[idx] += eps;
                fm[idx] -= eps;
                mp.read_params(&fp).unwrap();
                mm.read_params(&fm).unwrap();
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * eps);
                diff_sq += (grads[idx] - fd) * (grads[idx] - fd);
                fd_sq += fd * fd;
            }
            let rel = diff_sq.sqrt() / fd_sq.sqrt().max(1e-12);
            assert!(rel <= 1e-4, "gradient error {rel}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut rng = stream_rng(34, &[0]);
        let mut mlp = Mlp::init(&[3, 5, 2], OutputActivation::Identity, &mut rng);
        let before = {
            let mut v = Vec::new();
            mlp.write_params(&mut v);
            v
        };
        let g = Gradients::zeros_like(&mlp);
        let mut state = AdamState::new(&mlp, 1e-3);
        adam_step(&mut mlp, &g, &mut state);
        let mut after = Vec::new();
        mlp.write_params(&mut after);
        assert_eq!(before, after);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        // constant scalar gradient: bias corrections cancel at step 1,
        // update = lr * g / (|g| + eps) ~= lr * sign(g)
        let mut mlp = Mlp::zeros(&[1, 1], OutputActivation::Identity);
        let mut g = Gradients::zeros_like(&mlp);
        g.layers[0].0[0] = 0.37;
        let mut state = AdamState::new(&mlp, 1e-3);
        adam_step(&mut mlp, &g, &mut state);
        assert_relative_eq!(mlp.layers[0].w[0], -1e-3, epsilon = 1e-9);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = stream_rng(35, &[0]);
        let run = |rng: &mut rand_chacha::ChaCha12Rng| {
            let mut mlp = Mlp::init(&[3, 6, 2], OutputActivation::Identity, rng);
            let mut state = AdamState::new(&mlp, 1e-3);
            for k in 0..10 {
                let x = normal_vec(rng, 3);
                let (y, cache) = mlp.forward(&x).unwrap();
                let dl: Vec<f64> = y.iter().map(|v| v - k as f64 * 0.1).collect();
                let g = mlp.backward(&cache, &dl).unwrap();
                adam_step(&mut mlp, &g, &mut state);
            }
            let mut v = Vec::new();
            mlp.write_params(&mut v);
            v
        };
        let mut rng2 = stream_rng(35, &[0]);
        assert_eq!(run(&mut rng), run(&mut rng2));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = stream_rng(36, &[0]);
        let mlp = Mlp::init(&[4, 8, 2], OutputActivation::Logistic, &mut rng);
        let header = CheckpointHeader {
            model_kind: "discriminator".into(),
            layer_sizes: mlp.layer_sizes(),
            hidden_activation: mlp.hidden,
            output_activation: mlp.output,
            task_fingerprint: "fp".into(),
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
            extra: serde_json::json!({"n_modes": 3}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &header, &mlp).unwrap();
        let (h2, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2.model_kind, "discriminator");
        assert_eq!(h2.layer_sizes, header.layer_sizes);
        let mut a = Vec::new();
        let mut b = Vec::new();
        mlp.write_params(&mut a);
        m2.write_params(&mut b);
        assert_eq!(a, b);

        // byte determinism of saving
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &header, &mlp).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
