//! The two toy quasi-static tasks: planar card sliding and pinned rotor
//! turning. Defines geometry, per-finger workspaces, contact-mode tables,
//! constraint residual functions (with analytic gradients for the
//! optimizer), and the kinematic ground-truth simulator.
//!
//! Card: a `w x h` rectangle on a table, pose `(x, y, theta)`. Two point
//! fingers push on the card's top edge (`y = +h/2` in the card frame); the
//! task slides the card along world `-y`.
//!
//! Rotor: a disk of radius `r` pinned at the origin, pose `yaw` (unwrapped).
//! Three point fingers contact the rim; each finger is confined to an
//! angular sector spanning pi/3, so turning by pi/6 per mode exhausts a
//! sector after two turns and forces regrasp gaiting.

use crate::error::{DipsError, Result};
use crate::geom::{v2, wrap_angle, Vec2};
use crate::types::{ContactMode, Control, Dims, ObjectPose, State, TaskKind, Trajectory};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Per-finger workspace; fingers are clipped to it by the simulator and
/// projected onto it by the optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Workspace {
    /// Axis-aligned box (card task).
    Box { min: Vec2, max: Vec2 },
    /// Polar sector about the origin (rotor task).
    Sector {
        phi_min: f64,
        phi_max: f64,
        rho_min: f64,
        rho_max: f64,
    },
}

impl Workspace {
    pub fn clip(&self, q: Vec2) -> Vec2 {
        match self {
            Workspace::Box { min, max } => v2(q.x.clamp(min.x, max.x), q.y.clamp(min.y, max.y)),
            Workspace::Sector {
                phi_min,
                phi_max,
                rho_min,
                rho_max,
            } => {
                let rho = q.norm().clamp(*rho_min, *rho_max);
                let phi = q.angle().clamp(*phi_min, *phi_max);
                Vec2::from_polar(rho, phi)
            }
        }
    }

    pub fn contains(&self, q: Vec2, tol: f64) -> bool {
        match self {
            Workspace::Box { min, max } => {
                q.x >= min.x - tol && q.x <= max.x + tol && q.y >= min.y - tol && q.y <= max.y + tol
            }
            Workspace::Sector {
                phi_min,
                phi_max,
                rho_min,
                rho_max,
            } => {
                let rho = q.norm();
                let phi = q.angle();
                rho >= rho_min - tol
                    && rho <= rho_max + tol
                    && phi >= phi_min - tol / rho.max(1e-9)
                    && phi <= phi_max + tol / rho.max(1e-9)
            }
        }
    }
}

/// Target object displacement for the optimizer during one mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeGoal {
    /// Displacement in object-pose coordinates (card: dx, dy, dtheta;
    /// rotor: dyaw).
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mode: ContactMode,
    pub goal: ModeGoal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Geometry {
    Card { width: f64, height: f64 },
    Rotor { radius: f64 },
}

/// Per-episode regrasp targets, captured from the initial state.
///
/// Card: card-frame abscissas along the top edge. Rotor: world-frame rim
/// angles about the pin (the rim is rotationally symmetric, so a fixed
/// world point stays on the surface and regrasping there resets a finger's
/// sector workspace).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegraspTargets(pub Vec<f64>);

/// Full task definition. Serialized to JSON; its SHA-256 fingerprint is
/// embedded in datasets and model checkpoints to prevent cross-task mixing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskKind,
    pub n_f: usize,
    pub h: usize,
    /// Maximum executed modes per episode.
    pub k_max: usize,
    pub geometry: Geometry,
    pub workspaces: Vec<Workspace>,
    /// Coulomb friction coefficient at finger contacts.
    pub mu: f64,
    /// Bound on the environment contact-force norm (card only).
    pub f_e_max: f64,
    /// Regrasp clearance threshold (m).
    pub delta: f64,
    pub modes: Vec<ModeSpec>,
    /// Nominal regrasp targets (overridden per episode from the initial state).
    pub nominal_targets: RegraspTargets,
    /// Per-step displacement bound |dq| <= dq_max (componentwise).
    pub dq_max: f64,
    /// Force bound |f| <= f_max (componentwise, fingers and environment).
    pub f_max: f64,
    pub d_o: usize,
    pub d_env: usize,
}

impl TaskSpec {
    pub fn card() -> Self {
        let w = 0.09;
        let h = 0.06;
        // Boxes span 0.04 m in x (keeping each finger on its half of the
        // edge); in y they cover the full -6 cm goal travel plus the
        // regrasp clearance headroom above the starting edge.
        let boxes = vec![
            Workspace::Box {
                min: v2(-0.0425, -0.035),
                max: v2(-0.0025, 0.055),
            },
            Workspace::Box {
                min: v2(0.0025, -0.035),
                max: v2(0.0425, 0.055),
            },
        ];
        let push = ModeGoal {
            delta: vec![0.0, -0.02, 0.0],
        };
        let stay = ModeGoal {
            delta: vec![0.0, 0.0, 0.0],
        };
        TaskSpec {
            id: TaskKind::Card,
            n_f: 2,
            h: 8,
            k_max: 5,
            geometry: Geometry::Card {
                width: w,
                height: h,
            },
            workspaces: boxes,
            mu: 0.5,
            f_e_max: 2.0,
            delta: 0.015,
            modes: vec![
                ModeSpec {
                    mode: ContactMode::new(&[1, 0]),
                    goal: push.clone(),
                },
                ModeSpec {
                    mode: ContactMode::new(&[0, 1]),
                    goal: push.clone(),
                },
                ModeSpec {
                    mode: ContactMode::new(&[1, 1]),
                    goal: push,
                },
                ModeSpec {
                    mode: ContactMode::new(&[0, 0]),
                    goal: stay,
                },
            ],
            nominal_targets: RegraspTargets(vec![-0.0225, 0.0225]),
            dq_max: 0.01,
            f_max: 5.0,
            d_o: 3,
            d_env: 3,
        }
    }

    pub fn rotor() -> Self {
        use std::f64::consts::PI;
        let r = 0.04;
        // Home angles (sector tops); sectors span pi/3 below them and are
        // disjoint with pi/3 gaps, none crossing the atan2 seam at +-pi.
        let homes = [5.0 * PI / 6.0, PI / 6.0, -PI / 2.0];
        let sectors = homes
            .iter()
            .map(|&top| Workspace::Sector {
                phi_min: top - PI / 3.0,
                phi_max: top,
                rho_min: 0.02,
                rho_max: 0.07,
            })
            .collect();
        let turn = ModeGoal {
            delta: vec![-PI / 6.0],
        };
        let hold = ModeGoal { delta: vec![0.0] };
        TaskSpec {
            id: TaskKind::Rotor,
            n_f: 3,
            h: 8,
            k_max: 7,
            geometry: Geometry::Rotor { radius: r },
            workspaces: sectors,
            mu: 0.5,
            f_e_max: 2.0,
            delta: 0.015,
            modes: vec![
                ModeSpec {
                    mode: ContactMode::new(&[1, 1, 1]),
                    goal: turn,
                },
                ModeSpec {
                    mode: ContactMode::new(&[1, 0, 1]),
                    goal: hold.clone(),
                },
                ModeSpec {
                    mode: ContactMode::new(&[0, 1, 0]),
                    goal: hold,
                },
            ],
            nominal_targets: RegraspTargets(homes.to_vec()),
            dq_max: 0.01,
            f_max: 5.0,
            d_o: 1,
            d_env: 1,
        }
    }

    pub fn by_id(id: TaskKind) -> Self {
        match id {
            TaskKind::Card => TaskSpec::card(),
            TaskKind::Rotor => TaskSpec::rotor(),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            task: self.id,
            h: self.h,
            n_f: self.n_f,
            d_o: self.d_o,
            d_env: self.d_env,
        }
    }

    /// SHA-256 fingerprint of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("TaskSpec serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn mode_index(&self, mode: &ContactMode) -> Result<usize> {
        self.modes
            .iter()
            .position(|m| &m.mode == mode)
            .ok_or_else(|| DipsError::Config(format!("mode {mode} not in the task's mode table")))
    }

    /// Nominal initial state: object at the origin pose, fingers at the
    /// nominal targets on the contact surface.
    pub fn initial_state(&self) -> State {
        match self.id {
            TaskKind::Card => {
                let Geometry::Card { height, .. } = self.geometry else {
                    unreachable!()
                };
                State {
                    fingers: self
                        .nominal_targets
                        .0
                        .iter()
                        .map(|&a| v2(a, height / 2.0))
                        .collect(),
                    object: ObjectPose::Card {
                        x: 0.0,
                        y: 0.0,
                        theta: 0.0,
                    },
                }
            }
            TaskKind::Rotor => {
                let Geometry::Rotor { radius } = self.geometry else {
                    unreachable!()
                };
                State {
                    fingers: self
                        .nominal_targets
                        .0
                        .iter()
                        .map(|&psi| Vec2::from_polar(radius, psi))
                        .collect(),
                    object: ObjectPose::Rotor { yaw: 0.0 },
                }
            }
        }
    }

    /// Randomized on-surface initial state. `spread` scales how deep into
    /// the workspace the placements may fall (0 = nominal).
    pub fn sample_initial_state<R: Rng>(&self, rng: &mut R, spread: f64) -> (State, RegraspTargets) {
        match self.id {
            TaskKind::Card => {
                let Geometry::Card { height, .. } = self.geometry else {
                    unreachable!()
                };
                let mut abscissas = Vec::with_capacity(self.n_f);
                for ws in &self.workspaces {
                    let Workspace::Box { min, max } = ws else {
                        unreachable!()
                    };
                    let margin = 0.0025;
                    let lo = min.x + margin;
                    let hi = max.x - margin;
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo) * spread;
                    abscissas.push(rng.gen_range(mid - half..=mid + half));
                }
                let state = State {
                    fingers: abscissas.iter().map(|&a| v2(a, height / 2.0)).collect(),
                    object: ObjectPose::Card {
                        x: 0.0,
                        y: 0.0,
                        theta: 0.0,
                    },
                };
                (state, RegraspTargets(abscissas))
            }
            TaskKind::Rotor => {
                let Geometry::Rotor { radius } = self.geometry else {
                    unreachable!()
                };
                let mut angles = Vec::with_capacity(self.n_f);
                for ws in &self.workspaces {
                    let Workspace::Sector {
                        phi_min, phi_max, ..
                    } = ws
                    else {
                        unreachable!()
                    };
                    // sample within the top `spread` fraction of the sector
                    let depth = (phi_max - phi_min) * spread;
                    angles.push(rng.gen_range(phi_max - depth..=*phi_max));
                }
                let state = State {
                    fingers: angles
                        .iter()
                        .map(|&psi| Vec2::from_polar(radius, psi))
                        .collect(),
                    object: ObjectPose::Rotor { yaw: 0.0 },
                };
                (state, RegraspTargets(angles))
            }
        }
    }

    /// World-frame regrasp target point for a finger, given the current
    /// object pose.
    pub fn target_point(&self, targets: &RegraspTargets, finger: usize, object: &ObjectPose) -> Vec2 {
        match self.id {
            TaskKind::Card => {
                let Geometry::Card { height, .. } = self.geometry else {
                    unreachable!()
                };
                let local = v2(targets.0[finger], height / 2.0);
                object.xy() + local.rot(object.rotation())
            }
            TaskKind::Rotor => {
                let Geometry::Rotor { radius } = self.geometry else {
                    unreachable!()
                };
                Vec2::from_polar(radius, targets.0[finger])
            }
        }
    }
}

/// Signed distance with gradients w.r.t. the finger position and object
/// pose. `d_object` has the task's object-pose dimension.
#[derive(Clone, Debug)]
pub struct SignedDistance {
    pub value: f64,
    pub d_q: Vec2,
    pub d_object: Vec<f64>,
}

/// Signed distance from a finger position to the task's contact surface:
/// the card's top edge (negative on the interior side) or `|q| - r` for
/// the rotor rim.
pub fn signed_distance(task: &TaskSpec, q: Vec2, object: &ObjectPose) -> f64 {
    signed_distance_grad(task, q, object).value
}

pub fn signed_distance_grad(task: &TaskSpec, q: Vec2, object: &ObjectPose) -> SignedDistance {
    match (&task.geometry, object) {
        (Geometry::Rotor { radius }, ObjectPose::Rotor { .. }) => {
            let rho = q.norm();
            let d_q = if rho > 1e-12 { q * (1.0 / rho) } else { Vec2::ZERO };
            SignedDistance {
                value: rho - radius,
                d_q,
                d_object: vec![0.0],
            }
        }
        (Geometry::Card { width, height }, ObjectPose::Card { x, y, theta }) => {
            // local coordinates p = R(theta)^T (q - c)
            let rel = q - v2(*x, *y);
            let p = rel.rot(-theta);
            let half_w = width / 2.0;
            let half_h = height / 2.0;
            // dp/dtheta = d/dtheta [R(-theta) rel] = -perp(R(-theta) rel)... note:
            // d/dtheta R(-theta) v = R(-theta) (-perp(v))? Use: R(-t) v rotated; derivative
            // is -R'(-t) v = R(-t+pi/2)... easier: p(theta) = rel.rot(-theta),
            // dp/dtheta = rel.rot(-theta - pi/2) = -p.perp().
            let dp_dtheta = -p.perp();
            if p.x.abs() <= half_w {
                // interior of the edge: sd = p.y - h/2
                let value = p.y - half_h;
                // dsd/dp = (0, 1); chain through p = R(-theta)(q - c)
                let e = v2(0.0, 1.0);
                let d_q = e.rot(*theta); // R(theta) * e
                let d_c = -d_q;
                let d_theta = e.dot(dp_dtheta);
                SignedDistance {
                    value,
                    d_q,
                    d_object: vec![d_c.x, d_c.y, d_theta],
                }
            } else {
                // beyond an edge endpoint: distance to the endpoint, signed
                // by the side of the edge line
                let ex = half_w.copysign(p.x);
                let dvec = p - v2(ex, half_h);
                let dist = dvec.norm().max(1e-12);
                let sign = if p.y >= half_h { 1.0 } else { -1.0 };
                let dsd_dp = dvec * (sign / dist);
                let d_q = dsd_dp.rot(*theta);
                let d_c = -d_q;
                let d_theta = dsd_dp.dot(dp_dtheta);
                SignedDistance {
                    value: sign * dist,
                    d_q,
                    d_object: vec![d_c.x, d_c.y, d_theta],
                }
            }
        }
        _ => unreachable!("object pose variant matches the task"),
    }
}

/// Contact equality residuals: signed distance of every in-contact finger.
pub fn contact_residual(task: &TaskSpec, state: &State, mode: &ContactMode) -> Vec<f64> {
    mode.contact_fingers()
        .map(|i| signed_distance(task, state.fingers[i], &state.object))
        .collect()
}

/// Regrasp clearance residual for one finger at step `t` (1-based).
/// For `t < H`: `delta - sd` (satisfied when <= 0). At `t = H`: `|sd|`
/// (on-surface equality).
pub fn regrasp_clearance_residual(task: &TaskSpec, q: Vec2, object: &ObjectPose, t: usize, h: usize) -> f64 {
    let sd = signed_distance(task, q, object);
    if t < h {
        task.delta - sd
    } else {
        sd.abs()
    }
}

/// Sticking-contact kinematics residuals between consecutive states, for
/// every in-contact finger. Card: the finger's card-frame contact point is
/// equal at t and t+1 (2 rows per finger). Rotor: the finger's rim angle
/// relative to the yaw is constant (1 row per finger).
pub fn kinematics_residual(task: &TaskSpec, s_t: &State, s_next: &State, mode: &ContactMode) -> Vec<f64> {
    let mut out = Vec::new();
    match task.id {
        TaskKind::Card => {
            for i in mode.contact_fingers() {
                let p_t = (s_t.fingers[i] - s_t.object.xy()).rot(-s_t.object.rotation());
                let p_n = (s_next.fingers[i] - s_next.object.xy()).rot(-s_next.object.rotation());
                out.push(p_t.x - p_n.x);
                out.push(p_t.y - p_n.y);
            }
        }
        TaskKind::Rotor => {
            for i in mode.contact_fingers() {
                let a_t = s_t.fingers[i].angle() - s_t.object.rotation();
                let a_n = s_next.fingers[i].angle() - s_next.object.rotation();
                out.push(wrap_angle(a_n - a_t));
            }
        }
    }
    out
}

/// Quasi-static balance residuals. Card: force balance (2 rows) and torque
/// balance about the object origin (1 row), all in the object frame.
/// Rotor: torque balance about the pin only (the pin supplies any reaction
/// force).
pub fn balance_residual(task: &TaskSpec, s_t: &State, u_t: &Control, mode: &ContactMode) -> Vec<f64> {
    match task.id {
        TaskKind::Card => {
            let mut fx = u_t.env[0];
            let mut fy = u_t.env[1];
            let mut tau = u_t.env[2];
            for i in mode.contact_fingers() {
                let p = (s_t.fingers[i] - s_t.object.xy()).rot(-s_t.object.rotation());
                let f = u_t.f[i];
                fx += f.x;
                fy += f.y;
                tau += p.cross(f);
            }
            vec![fx, fy, tau]
        }
        TaskKind::Rotor => {
            let mut tau = u_t.env[0];
            for i in mode.contact_fingers() {
                let p = s_t.fingers[i].rot(-s_t.object.rotation());
                tau += p.cross(u_t.f[i]);
            }
            vec![tau]
        }
    }
}

/// Coulomb friction-cone inequality residuals (satisfied when <= 0).
/// Per contact finger: `|f_t| - mu * f_n` and `-f_n`, in the local surface
/// frame at the contact point; for the card, additionally
/// `|f_e| - f_e_max` on the environment force.
pub fn friction_residual(task: &TaskSpec, s_t: &State, u_t: &Control, mode: &ContactMode) -> Vec<f64> {
    let mut out = Vec::new();
    for i in mode.contact_fingers() {
        let f = u_t.f[i];
        let (f_n, f_t) = contact_force_components(task, s_t, i, f);
        out.push(f_t.abs() - task.mu * f_n);
        out.push(-f_n);
    }
    if task.id == TaskKind::Card {
        let fe = v2(u_t.env[0], u_t.env[1]);
        out.push(fe.norm() - task.f_e_max);
    }
    out
}

/// Decompose an object-frame contact force into (inward normal, tangential)
/// components in the surface frame at finger `i`'s contact point.
pub fn contact_force_components(task: &TaskSpec, s_t: &State, finger: usize, f: Vec2) -> (f64, f64) {
    match task.id {
        // Card top edge: outward normal is +y in the card frame.
        TaskKind::Card => (-f.y, f.x),
        // Rotor rim: outward normal is radial at the contact point.
        TaskKind::Rotor => {
            let p = s_t.fingers[finger].rot(-s_t.object.rotation());
            let n = p.unit();
            (-f.dot(n), f.dot(n.perp()))
        }
    }
}

/// Validity of a state under a mode. Rotor: every in-contact finger within
/// `2 * delta` of the rim (a farther finger has effectively dropped the
/// rotor). Card: always valid.
pub fn is_valid(task: &TaskSpec, state: &State, mode: &ContactMode) -> bool {
    match task.id {
        TaskKind::Card => true,
        TaskKind::Rotor => mode
            .contact_fingers()
            .all(|i| signed_distance(task, state.fingers[i], &state.object).abs() <= 2.0 * task.delta),
    }
}

/// Fit the object's rigid motion to the in-contact fingers' displacements.
/// Returns (rotation angle about the fit center, translation) in world
/// coordinates as a map `p -> R(p - ...)`; see `simulate_step`.
fn fit_rigid_card(prev: &[Vec2], next: &[Vec2]) -> (f64, Vec2, Vec2) {
    // closed-form 2-D least-squares rigid fit (rotation + translation)
    let n = prev.len() as f64;
    let mut cp = Vec2::ZERO;
    let mut cn = Vec2::ZERO;
    for (p, q) in prev.iter().zip(next) {
        cp = cp + *p;
        cn = cn + *q;
    }
    cp = cp * (1.0 / n);
    cn = cn * (1.0 / n);
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    for (p, q) in prev.iter().zip(next) {
        let a = *p - cp;
        let b = *q - cn;
        sin_sum += a.cross(b);
        cos_sum += a.dot(b);
    }
    let theta = if prev.len() < 2 || (sin_sum == 0.0 && cos_sum == 0.0) {
        // single contact: translation only
        0.0
    } else {
        sin_sum.atan2(cos_sum)
    };
    (theta, cp, cn)
}

/// Rotation about the origin fitted to rim-point displacements.
fn fit_rotation_about_origin(prev: &[Vec2], next: &[Vec2]) -> f64 {
    let mut sin_sum = 0.0;
    let mut cos_sum = 0.0;
    for (p, q) in prev.iter().zip(next) {
        sin_sum += p.cross(*q);
        cos_sum += p.dot(*q);
    }
    if sin_sum == 0.0 && cos_sum == 0.0 {
        0.0
    } else {
        sin_sum.atan2(cos_sum)
    }
}

/// Ground-truth kinematic step. Fingers move by `dq` clipped to their
/// workspaces; the object motion is the least-squares rigid transform
/// fitted to the in-contact fingers' displacements (card: rotation +
/// translation, zero rotation with a single contact; rotor: rotation about
/// the pin). In-contact fingers are then re-projected so their object-frame
/// contact points are preserved exactly; with zero contacts the object is
/// stationary.
pub fn simulate_step(task: &TaskSpec, state: &State, dq: &[Vec2], mode: &ContactMode) -> State {
    let commanded: Vec<Vec2> = state
        .fingers
        .iter()
        .zip(dq)
        .enumerate()
        .map(|(i, (q, d))| task.workspaces[i].clip(*q + *d))
        .collect();

    let contact: Vec<usize> = mode.contact_fingers().collect();
    let prev: Vec<Vec2> = contact.iter().map(|&i| state.fingers[i]).collect();
    let next: Vec<Vec2> = contact.iter().map(|&i| commanded[i]).collect();

    let mut fingers = commanded;
    let object = match (&state.object, task.id) {
        (ObjectPose::Card { x, y, theta }, TaskKind::Card) => {
            if contact.is_empty() {
                state.object
            } else {
                let (rot, cp, cn) = fit_rigid_card(&prev, &next);
                // world map: T(p) = R(rot) (p - cp) + cn
                let map = |p: Vec2| (p - cp).rot(rot) + cn;
                let new_xy = map(v2(*x, *y));
                for &i in &contact {
                    fingers[i] = map(state.fingers[i]);
                }
                ObjectPose::Card {
                    x: new_xy.x,
                    y: new_xy.y,
                    theta: theta + rot,
                }
            }
        }
        (ObjectPose::Rotor { yaw }, TaskKind::Rotor) => {
            if contact.is_empty() {
                state.object
            } else {
                let rot = fit_rotation_about_origin(&prev, &next);
                for &i in &contact {
                    fingers[i] = state.fingers[i].rot(rot);
                }
                ObjectPose::Rotor { yaw: yaw + rot }
            }
        }
        _ => unreachable!("pose variant matches the task"),
    };

    State { fingers, object }
}

/// Roll a control sequence through the simulator from `s0`, producing an
/// executed trajectory of the same horizon (states `1..=H`, with
/// `states[0] = s0`). Controls are copied from the plan.
pub fn rollout(task: &TaskSpec, s0: &State, controls: &[Control], mode: &ContactMode) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len());
    states.push(s0.clone());
    for t in 0..controls.len() - 1 {
        let next = simulate_step(task, &states[t], &controls[t].dq, mode);
        states.push(next);
    }
    Trajectory {
        states,
        controls: controls.to_vec(),
    }
}

/// Fraction of a goal displacement the contact fingers can follow without
/// leaving their workspaces (rigid co-motion).
fn reachable_fraction(task: &TaskSpec, mode: &ContactMode, s0: &State, delta: &[f64]) -> f64 {
    let margin = 1e-4;
    let mut frac: f64 = 1.0;
    match task.id {
        TaskKind::Rotor => {
            let dyaw = delta[0];
            if dyaw.abs() < 1e-12 {
                return 1.0;
            }
            for i in mode.contact_fingers() {
                let Workspace::Sector {
                    phi_min, phi_max, ..
                } = task.workspaces[i]
                else {
                    unreachable!()
                };
                let ang = s0.fingers[i].angle();
                let room = if dyaw < 0.0 {
                    (ang - phi_min - margin).max(0.0)
                } else {
                    (phi_max - ang - margin).max(0.0)
                };
                frac = frac.min(room / dyaw.abs());
            }
        }
        TaskKind::Card => {
            // goals translate; clamp per axis against each contact box
            for i in mode.contact_fingers() {
                let Workspace::Box { min, max } = task.workspaces[i] else {
                    unreachable!()
                };
                let q = s0.fingers[i];
                for (d, coord, lo, hi) in [
                    (delta[0], q.x, min.x, max.x),
                    (delta[1], q.y, min.y, max.y),
                ] {
                    if d.abs() < 1e-12 {
                        continue;
                    }
                    let room = if d < 0.0 {
                        (coord - lo - margin).max(0.0)
                    } else {
                        (hi - coord - margin).max(0.0)
                    };
                    frac = frac.min(room / d.abs());
                }
            }
        }
    }
    frac.clamp(0.0, 1.0)
}

/// Deterministic nominal trajectory for a mode from a start state: the
/// object interpolates linearly toward the mode's goal displacement
/// (clamped to the fraction the contact fingers' workspaces allow), contact
/// fingers ride along rigidly, and regrasping fingers travel to their
/// target points behind a sine-profile clearance lift. Controls carry the
/// state differences with zero forces. Used as the optimizer's cold-start
/// initialization and as the deterministic proposal stub in search tests.
pub fn nominal_trajectory(
    task: &TaskSpec,
    targets: &RegraspTargets,
    mode_idx: usize,
    s0: &State,
) -> Trajectory {
    let h = task.h;
    let mode = &task.modes[mode_idx].mode;
    let goal = &task.modes[mode_idx].goal;
    let o0 = s0.object.to_vec();
    let lift = 1.5 * task.delta;

    // clamp the interpolation amplitude to what the contact fingers'
    // workspaces admit under rigid co-motion
    let amplitude = reachable_fraction(task, mode, s0, &goal.delta);
    let pose_at = |a: f64| -> ObjectPose {
        let v: Vec<f64> = o0
            .iter()
            .zip(&goal.delta)
            .map(|(o, d)| o + a * amplitude * d)
            .collect();
        ObjectPose::from_slice(task.id, &v)
    };
    let final_pose = pose_at(1.0);

    let mut states = Vec::with_capacity(h);
    for t in 0..h {
        let a = t as f64 / (h - 1) as f64;
        let object = pose_at(a);
        let mut fingers = Vec::with_capacity(task.n_f);
        for i in 0..task.n_f {
            if mode.in_contact(i) {
                // rigid co-motion with the object
                let q = match (task.id, &s0.object, &object) {
                    (TaskKind::Card, _, _) => {
                        let local = (s0.fingers[i] - s0.object.xy()).rot(-s0.object.rotation());
                        object.xy() + local.rot(object.rotation())
                    }
                    (TaskKind::Rotor, ObjectPose::Rotor { yaw: y0 }, ObjectPose::Rotor { yaw }) => {
                        s0.fingers[i].rot(yaw - y0)
                    }
                    _ => unreachable!(),
                };
                fingers.push(q);
            } else {
                let target = task.target_point(targets, i, &final_pose);
                let bump = lift * (std::f64::consts::PI * a).sin();
                let q = match task.id {
                    TaskKind::Card => {
                        // straight line with a lift along world +y
                        let base = s0.fingers[i] + (target - s0.fingers[i]) * a;
                        base + v2(0.0, bump)
                    }
                    TaskKind::Rotor => {
                        // polar interpolation keeps the path outside the disk
                        let a0 = s0.fingers[i].angle();
                        let a1 = target.angle();
                        let r0 = s0.fingers[i].norm();
                        let r1 = target.norm();
                        let ang = a0 + wrap_angle(a1 - a0) * a;
                        Vec2::from_polar(r0 + (r1 - r0) * a + bump, ang)
                    }
                };
                fingers.push(q);
            }
        }
        states.push(State { fingers, object });
    }

    let mut controls = Vec::with_capacity(h);
    for t in 0..h {
        let mut u = Control::zeros(&task.dims());
        if t + 1 < h {
            for i in 0..task.n_f {
                u.dq[i] = states[t + 1].fingers[i] - states[t].fingers[i];
            }
        }
        controls.push(u);
    }
    Trajectory { states, controls }
}
