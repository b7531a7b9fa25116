//! Shared domain types: states, controls, trajectories, contact modes and
//! datasets, plus the flat-vector encoding used by the diffusion model.
//!
//! A trajectory of horizon `H` flattens to a vector of dimension
//! `H * (d_s + d_u)`, laid out per timestep: `[s_1, u_1, s_2, u_2, ...]`.
//! Within a state: finger positions then object pose. Within a control:
//! `(dq_i, f_i)` per finger then the environment wrench.

use crate::error::{DipsError, Result};
use crate::geom::Vec2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Card,
    Rotor,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Card => "card",
            TaskKind::Rotor => "rotor",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = DipsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "card" => Ok(TaskKind::Card),
            "rotor" => Ok(TaskKind::Rotor),
            other => Err(DipsError::Config(format!("unknown task id `{other}`"))),
        }
    }
}

/// Trajectory dimensions, fixed per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub task: TaskKind,
    /// Steps per mode segment.
    pub h: usize,
    /// Number of fingers.
    pub n_f: usize,
    /// Object pose dimension (card: x, y, theta; rotor: yaw).
    pub d_o: usize,
    /// Environment wrench dimension (card: f_ex, f_ey, tau_e; rotor: tau_e).
    pub d_env: usize,
}

impl Dims {
    pub fn d_s(&self) -> usize {
        2 * self.n_f + self.d_o
    }

    pub fn d_u(&self) -> usize {
        4 * self.n_f + self.d_env
    }

    pub fn per_step(&self) -> usize {
        self.d_s() + self.d_u()
    }

    /// Flattened trajectory dimension `H * (d_s + d_u)`.
    pub fn flat(&self) -> usize {
        self.h * self.per_step()
    }

    /// Offset of timestep `t` (0-based) in the flat vector.
    pub fn step_offset(&self, t: usize) -> usize {
        t * self.per_step()
    }

    /// Offset of the control block within a step.
    pub fn control_offset(&self) -> usize {
        self.d_s()
    }
}

/// Binary in-contact assignment per finger (1 = contact, 0 = regrasp).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactMode(pub Vec<u8>);

impl ContactMode {
    pub fn new(flags: &[u8]) -> Self {
        assert!(flags.iter().all(|&f| f <= 1), "contact flags must be 0/1");
        ContactMode(flags.to_vec())
    }

    pub fn n_fingers(&self) -> usize {
        self.0.len()
    }

    pub fn in_contact(&self, finger: usize) -> bool {
        self.0[finger] == 1
    }

    pub fn contact_fingers(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &f)| f == 1).map(|(i, _)| i)
    }

    pub fn regrasp_fingers(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &f)| f == 0).map(|(i, _)| i)
    }

    pub fn n_contact(&self) -> usize {
        self.0.iter().filter(|&&f| f == 1).count()
    }
}

impl std::fmt::Display for ContactMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, flag) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{flag}")?;
        }
        write!(f, ")")
    }
}

/// Ordered contact-mode sequence.
pub type ContactSequence = Vec<ContactMode>;

/// Object pose. Angles are stored unwrapped so cumulative turning is
/// measurable across many modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectPose {
    Card { x: f64, y: f64, theta: f64 },
    Rotor { yaw: f64 },
}

impl ObjectPose {
    pub fn dim(&self) -> usize {
        match self {
            ObjectPose::Card { .. } => 3,
            ObjectPose::Rotor { .. } => 1,
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        match self {
            ObjectPose::Card { x, y, theta } => vec![x, y, theta],
            ObjectPose::Rotor { yaw } => vec![yaw],
        }
    }

    pub fn from_slice(task: TaskKind, v: &[f64]) -> Self {
        match task {
            TaskKind::Card => ObjectPose::Card {
                x: v[0],
                y: v[1],
                theta: v[2],
            },
            TaskKind::Rotor => ObjectPose::Rotor { yaw: v[0] },
        }
    }

    pub fn xy(&self) -> Vec2 {
        match self {
            ObjectPose::Card { x, y, .. } => Vec2 { x: *x, y: *y },
            ObjectPose::Rotor { .. } => Vec2::ZERO,
        }
    }

    pub fn rotation(&self) -> f64 {
        match self {
            ObjectPose::Card { theta, .. } => *theta,
            ObjectPose::Rotor { yaw } => *yaw,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub fingers: Vec<Vec2>,
    pub object: ObjectPose,
}

impl State {
    pub fn dim(&self) -> usize {
        2 * self.fingers.len() + self.object.dim()
    }

    pub fn write_into(&self, out: &mut [f64]) {
        let mut i = 0;
        for q in &self.fingers {
            out[i] = q.x;
            out[i + 1] = q.y;
            i += 2;
        }
        for v in self.object.to_vec() {
            out[i] = v;
            i += 1;
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.write_into(&mut v);
        v
    }

    pub fn from_slice(dims: &Dims, v: &[f64]) -> Self {
        let fingers = (0..dims.n_f)
            .map(|i| Vec2 {
                x: v[2 * i],
                y: v[2 * i + 1],
            })
            .collect();
        State {
            fingers,
            object: ObjectPose::from_slice(dims.task, &v[2 * dims.n_f..dims.d_s()]),
        }
    }
}

/// Per-step control: per-finger displacement and contact force (object
/// frame), plus the environment wrench. Regrasping fingers carry no
/// contact force; their `f` entries are zeroed where modes are known.
#[derive(Clone, Debug, PartialEq)]
pub struct Control {
    pub dq: Vec<Vec2>,
    pub f: Vec<Vec2>,
    pub env: Vec<f64>,
}

impl Control {
    pub fn zeros(dims: &Dims) -> Self {
        Control {
            dq: vec![Vec2::ZERO; dims.n_f],
            f: vec![Vec2::ZERO; dims.n_f],
            env: vec![0.0; dims.d_env],
        }
    }

    pub fn dim(&self) -> usize {
        4 * self.dq.len() + self.env.len()
    }

    pub fn write_into(&self, out: &mut [f64]) {
        let mut i = 0;
        for k in 0..self.dq.len() {
            out[i] = self.dq[k].x;
            out[i + 1] = self.dq[k].y;
            out[i + 2] = self.f[k].x;
            out[i + 3] = self.f[k].y;
            i += 4;
        }
        for &e in &self.env {
            out[i] = e;
            i += 1;
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.write_into(&mut v);
        v
    }

    pub fn from_slice(dims: &Dims, v: &[f64]) -> Self {
        let mut dq = Vec::with_capacity(dims.n_f);
        let mut f = Vec::with_capacity(dims.n_f);
        for k in 0..dims.n_f {
            let b = 4 * k;
            dq.push(Vec2 { x: v[b], y: v[b + 1] });
            f.push(Vec2 {
                x: v[b + 2],
                y: v[b + 3],
            });
        }
        Control {
            dq,
            f,
            env: v[4 * dims.n_f..dims.d_u()].to_vec(),
        }
    }

    /// Zero the contact-force entries of regrasping fingers.
    pub fn enforce_mode(&mut self, mode: &ContactMode) {
        for i in mode.regrasp_fingers() {
            self.f[i] = Vec2::ZERO;
        }
    }
}

/// A mode segment: states and controls, both of length exactly `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn first_state(&self) -> &State {
        &self.states[0]
    }

    pub fn last_state(&self) -> &State {
        self.states.last().expect("trajectory has H >= 1 states")
    }

    fn check_dims(&self, dims: &Dims) -> Result<()> {
        if self.states.len() != dims.h || self.controls.len() != dims.h {
            return Err(DipsError::Dimension {
                what: "trajectory horizon",
                expected: dims.h,
                actual: self.states.len().min(self.controls.len()),
            });
        }
        for s in &self.states {
            if s.dim() != dims.d_s() {
                return Err(DipsError::Dimension {
                    what: "state",
                    expected: dims.d_s(),
                    actual: s.dim(),
                });
            }
        }
        for u in &self.controls {
            if u.dim() != dims.d_u() {
                return Err(DipsError::Dimension {
                    what: "control",
                    expected: dims.d_u(),
                    actual: u.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Flatten a trajectory to the diffusion vector space.
pub fn flatten(traj: &Trajectory, dims: &Dims) -> Result<Vec<f64>> {
    traj.check_dims(dims)?;
    let mut v = vec![0.0; dims.flat()];
    for t in 0..dims.h {
        let off = dims.step_offset(t);
        traj.states[t].write_into(&mut v[off..off + dims.d_s()]);
        traj.controls[t].write_into(&mut v[off + dims.d_s()..off + dims.per_step()]);
    }
    Ok(v)
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &[f64], dims: &Dims) -> Result<Trajectory> {
    if v.len() != dims.flat() {
        return Err(DipsError::Dimension {
            what: "flat trajectory",
            expected: dims.flat(),
            actual: v.len(),
        });
    }
    let mut states = Vec::with_capacity(dims.h);
    let mut controls = Vec::with_capacity(dims.h);
    for t in 0..dims.h {
        let off = dims.step_offset(t);
        states.push(State::from_slice(dims, &v[off..off + dims.d_s()]));
        controls.push(Control::from_slice(
            dims,
            &v[off + dims.d_s()..off + dims.per_step()],
        ));
    }
    Ok(Trajectory { states, controls })
}

const STD_FLOOR: f64 = 1e-6;

/// Per-dimension normalization statistics over a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(vectors: &[Vec<f64>]) -> Result<Self> {
        let n = vectors.len();
        if n == 0 {
            return Err(DipsError::EmptyBatch);
        }
        let dim = vectors[0].len();
        let mut mean = vec![0.0; dim];
        for v in vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                let d = x - m;
                *s += d * d;
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    /// Normalize a slice of leading dimensions (e.g. the first-state block).
    pub fn normalize_block(&self, v: &[f64], offset: usize) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[offset + i]) / self.std[offset + i])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub trajectory: Trajectory,
    pub mode: ContactMode,
    pub low_quality: bool,
}

/// Training dataset: (trajectory, contact mode) pairs from one task, plus
/// normalization statistics over all entries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    pub stats: NormStats,
    pub fingerprint: String,
    pub dims: Dims,
}

impl Dataset {
    pub fn from_entries(entries: Vec<DatasetEntry>, dims: Dims, fingerprint: String) -> Result<Self> {
        let flats: Result<Vec<_>> = entries.iter().map(|e| flatten(&e.trajectory, &dims)).collect();
        let stats = NormStats::compute(&flats?)?;
        Ok(Dataset {
            entries,
            stats,
            fingerprint,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    contact_mode: Vec<u8>,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    low_quality: bool,
}

#[derive(Serialize, Deserialize)]
pub struct StatsSidecar {
    pub task: String,
    pub task_fingerprint: String,
    pub n_entries: usize,
    pub h: usize,
    pub d_s: usize,
    pub d_u: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Write the dataset as JSON Lines plus a statistics sidecar.
pub fn write_dataset(dataset: &Dataset, jsonl_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(jsonl_path)?);
    for e in &dataset.entries {
        let rec = EntryRecord {
            contact_mode: e.mode.0.clone(),
            states: e.trajectory.states.iter().map(|s| s.to_vec()).collect(),
            controls: e.trajectory.controls.iter().map(|u| u.to_vec()).collect(),
            low_quality: e.low_quality,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let sidecar = StatsSidecar {
        task: dataset.dims.task.as_str().to_string(),
        task_fingerprint: dataset.fingerprint.clone(),
        n_entries: dataset.entries.len(),
        h: dataset.dims.h,
        d_s: dataset.dims.d_s(),
        d_u: dataset.dims.d_u(),
        mean: dataset.stats.mean.clone(),
        std: dataset.stats.std.clone(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(sidecar_path)?);
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`], validating dimensions and
/// the task fingerprint.
pub fn read_dataset(
    jsonl_path: &Path,
    sidecar_path: &Path,
    dims: Dims,
    expected_fingerprint: &str,
) -> Result<Dataset> {
    let sidecar: StatsSidecar =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(sidecar_path)?))?;
    if sidecar.task_fingerprint != expected_fingerprint {
        return Err(DipsError::FingerprintMismatch {
            context: format!("dataset sidecar {}", sidecar_path.display()),
            expected: expected_fingerprint.to_string(),
            actual: sidecar.task_fingerprint,
        });
    }
    if sidecar.mean.len() != dims.flat() {
        return Err(DipsError::Dimension {
            what: "sidecar statistics",
            expected: dims.flat(),
            actual: sidecar.mean.len(),
        });
    }

    let reader = std::io::BufReader::new(std::fs::File::open(jsonl_path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EntryRecord = serde_json::from_str(&line)?;
        if rec.states.len() != dims.h || rec.controls.len() != dims.h {
            return Err(DipsError::Dimension {
                what: "dataset entry horizon",
                expected: dims.h,
                actual: rec.states.len(),
            });
        }
        let states = rec
            .states
            .iter()
            .map(|v| {
                if v.len() != dims.d_s() {
                    return Err(DipsError::Dimension {
                        what: "dataset state",
                        expected: dims.d_s(),
                        actual: v.len(),
                    });
                }
                Ok(State::from_slice(&dims, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let controls = rec
            .controls
            .iter()
            .map(|v| {
                if v.len() != dims.d_u() {
                    return Err(DipsError::Dimension {
                        what: "dataset control",
                        expected: dims.d_u(),
                        actual: v.len(),
                    });
                }
                Ok(Control::from_slice(&dims, v))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(DatasetEntry {
            trajectory: Trajectory { states, controls },
            mode: ContactMode::new(&rec.contact_mode),
            low_quality: rec.low_quality,
        });
    }
    Ok(Dataset {
        entries,
        stats: NormStats {
            mean: sidecar.mean,
            std: sidecar.std,
        },
        fingerprint: sidecar.task_fingerprint,
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::v2;
    use proptest::prelude::*;

    fn card_dims() -> Dims {
        Dims {
            task: TaskKind::Card,
            h: 8,
            n_f: 2,
            d_o: 3,
            d_env: 3,
        }
    }

    fn tiny_dims() -> Dims {
        Dims {
            task: TaskKind::Rotor,
            h: 1,
            n_f: 1,
            d_o: 1,
            d_env: 1,
        }
    }

    #[test]
    fn card_flat_dimension_is_144() {
        let d = card_dims();
        assert_eq!(d.d_s(), 7);
        assert_eq!(d.d_u(), 11);
        assert_eq!(d.flat(), 144);
    }

    #[test]
    fn zero_trajectory_flattens_to_zero_vector() {
        // H=1, d_s=2, d_u=2 is not representable with finger+object layout,
        // so use the smallest real layout and check the all-zero case.
        let d = tiny_dims();
        let traj = Trajectory {
            states: vec![State {
                fingers: vec![Vec2::ZERO],
                object: ObjectPose::Rotor { yaw: 0.0 },
            }],
            controls: vec![Control::zeros(&d)],
        };
        let v = flatten(&traj, &d).unwrap();
        assert_eq!(v.len(), d.flat());
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let d = card_dims();
        let bad = vec![0.0; 10];
        let err = unflatten(&bad, &d).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 144"), "{msg}");
        assert!(msg.contains("got 10"), "{msg}");
    }

    fn arb_trajectory(d: Dims) -> impl Strategy<Value = Trajectory> {
        let n = d.flat();
        proptest::collection::vec(-1e3f64..1e3, n..=n)
            .prop_map(move |v| unflatten(&v, &d).unwrap())
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(traj in arb_trajectory(card_dims())) {
            let d = card_dims();
            let v = flatten(&traj, &d).unwrap();
            let back = unflatten(&v, &d).unwrap();
            prop_assert_eq!(&back, &traj);
            let v2 = flatten(&back, &d).unwrap();
            prop_assert_eq!(v, v2);
        }
    }

    #[test]
    fn normalization_roundtrip() {
        let d = card_dims();
        let mut vectors = Vec::new();
        for i in 0..16 {
            let v: Vec<f64> = (0..d.flat())
                .map(|j| ((i * 31 + j * 7) % 13) as f64 * 0.37 - 1.5)
                .collect();
            vectors.push(v);
        }
        let stats = NormStats::compute(&vectors).unwrap();
        for v in &vectors {
            let z = stats.normalize(v);
            let back = stats.denormalize(&z);
            for (a, b) in v.iter().zip(&back) {
                let rel = (a - b).abs() / a.abs().max(1.0);
                assert!(rel < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mean_vector_normalizes_to_zero() {
        let vectors = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
        let stats = NormStats::compute(&vectors).unwrap();
        let z = stats.normalize(&[2.0, 2.0, 2.0]);
        assert!(z.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn constant_dimension_roundtrips_exactly() {
        // second dimension constant: std floored at 1e-6
        let vectors = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let stats = NormStats::compute(&vectors).unwrap();
        assert_eq!(stats.std[1], 1e-6);
        let z = stats.normalize(&[2.0, 5.0]);
        assert_eq!(z[1], 0.0);
        let back = stats.denormalize(&z);
        assert_eq!(back[1], 5.0);
    }

    #[test]
    fn dataset_jsonl_roundtrip() {
        let d = tiny_dims();
        let mk = |a: f64| Trajectory {
            states: vec![State {
                fingers: vec![v2(a, -a)],
                object: ObjectPose::Rotor { yaw: a * 0.5 },
            }],
            controls: vec![Control {
                dq: vec![v2(0.01, 0.0)],
                f: vec![v2(0.0, -1.0)],
                env: vec![a],
            }],
        };
        let entries = vec![
            DatasetEntry {
                trajectory: mk(0.25),
                mode: ContactMode::new(&[1]),
                low_quality: false,
            },
            DatasetEntry {
                trajectory: mk(-0.5),
                mode: ContactMode::new(&[0]),
                low_quality: true,
            },
        ];
        let ds = Dataset::from_entries(entries, d, "fp".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("d.jsonl");
        let sp = dir.path().join("d.stats.json");
        write_dataset(&ds, &jp, &sp).unwrap();
        let back = read_dataset(&jp, &sp, d, "fp").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.entries[0].trajectory, ds.entries[0].trajectory);
        assert!(back.entries[1].low_quality);
        let err = read_dataset(&jp, &sp, d, "other").unwrap_err();
        assert!(matches!(err, DipsError::FingerprintMismatch { .. }));
    }
}
