//! Constraint residual stacks over the flat decision vector, with analytic
//! gradients, and the augmented-Lagrangian objective built on them.
//!
//! Row order is fixed (multiplier vectors index into it):
//!   equalities:   contact (all t), kinematics (t < H-1), balance (all t),
//!                 terminal regrasp on-surface (t = H-1),
//!                 consistency q_t + dq_t - q_{t+1} (all fingers, t < H-1)
//!   inequalities: friction cones (all t), regrasp clearance (window)
//!
//! Workspace and control bounds are enforced by projection in the solver
//! and only appear in the reported stacks via [`bound_residuals`].

use super::{cost::cost_value_grad, Layout, ModeProblem, OptConfig};
use crate::domain::{signed_distance_grad, Workspace};
use crate::geom::{v2, wrap_angle};
use crate::types::{TaskKind, Trajectory};

/// Receives residual rows in the fixed stack order.
pub(crate) trait RowSink {
    fn eq_row(&mut self, value: f64, grad: &[(usize, f64)]);
    fn ineq_row(&mut self, value: f64, grad: &[(usize, f64)]);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub n_eq: usize,
    pub n_ineq: usize,
}

struct Counter {
    n_eq: usize,
    n_ineq: usize,
}

impl RowSink for Counter {
    fn eq_row(&mut self, _: f64, _: &[(usize, f64)]) {
        self.n_eq += 1;
    }
    fn ineq_row(&mut self, _: f64, _: &[(usize, f64)]) {
        self.n_ineq += 1;
    }
}

struct Collector {
    eq: Vec<f64>,
    ineq: Vec<f64>,
}

impl RowSink for Collector {
    fn eq_row(&mut self, value: f64, _: &[(usize, f64)]) {
        self.eq.push(value);
    }
    fn ineq_row(&mut self, value: f64, _: &[(usize, f64)]) {
        self.ineq.push(value);
    }
}

/// Augmented-Lagrangian accumulator (PHR form): equalities contribute
/// `lambda h + (rho/2) h^2`, inequalities `(max(0, mu + rho g)^2 - mu^2) / (2 rho)`.
struct AlAccum<'a> {
    lambda: &'a [f64],
    mu: &'a [f64],
    rho: f64,
    value: f64,
    grad: &'a mut [f64],
    i_eq: usize,
    i_ineq: usize,
}

impl RowSink for AlAccum<'_> {
    fn eq_row(&mut self, h: f64, grad: &[(usize, f64)]) {
        let lam = self.lambda[self.i_eq];
        self.value += lam * h + 0.5 * self.rho * h * h;
        let coeff = lam + self.rho * h;
        for &(idx, g) in grad {
            self.grad[idx] += coeff * g;
        }
        self.i_eq += 1;
    }

    fn ineq_row(&mut self, g_val: f64, grad: &[(usize, f64)]) {
        let mu = self.mu[self.i_ineq];
        let s = (mu + self.rho * g_val).max(0.0);
        self.value += (s * s - mu * mu) / (2.0 * self.rho);
        if s > 0.0 {
            for &(idx, g) in grad {
                self.grad[idx] += s * g;
            }
        }
        self.i_ineq += 1;
    }
}

/// Walk every constraint row in stack order, reporting value and gradient.
/// `clearance_margin` tightens the clearance rows (used inside the solver;
/// zero when reporting).
pub(crate) fn visit_rows<S: RowSink>(
    problem: &ModeProblem,
    layout: &Layout,
    z: &[f64],
    clearance_margin: f64,
    sink: &mut S,
) {
    let task = problem.task;
    let mode = problem.mode();
    let h = layout.dims.h;
    let mut grad: Vec<(usize, f64)> = Vec::with_capacity(16);

    let states: Vec<_> = (0..h).map(|t| layout.state_at(z, t)).collect();

    // contact equalities
    for (t, s) in states.iter().enumerate() {
        for i in mode.contact_fingers() {
            let sd = signed_distance_grad(task, s.fingers[i], &s.object);
            grad.clear();
            let (qx, qy) = layout.q(t, i);
            grad.push((qx, sd.d_q.x));
            grad.push((qy, sd.d_q.y));
            for (k, dk) in sd.d_object.iter().enumerate() {
                grad.push((layout.obj(t, k), *dk));
            }
            sink.eq_row(sd.value, &grad);
        }
    }

    // with no contact fingers the quasi-static object cannot move
    if mode.n_contact() == 0 {
        for t in 0..h - 1 {
            for k in 0..layout.dims.d_o {
                grad.clear();
                grad.push((layout.obj(t + 1, k), 1.0));
                grad.push((layout.obj(t, k), -1.0));
                sink.eq_row(z[layout.obj(t + 1, k)] - z[layout.obj(t, k)], &grad);
            }
        }
    }

    // sticking kinematics between consecutive steps
    for t in 0..h - 1 {
        let (s_t, s_n) = (&states[t], &states[t + 1]);
        match task.id {
            TaskKind::Card => {
                let th_t = s_t.object.rotation();
                let th_n = s_n.object.rotation();
                let c_t = s_t.object.xy();
                let c_n = s_n.object.xy();
                for i in mode.contact_fingers() {
                    let p_t = (s_t.fingers[i] - c_t).rot(-th_t);
                    let p_n = (s_n.fingers[i] - c_n).rot(-th_n);
                    let r = p_t - p_n;
                    let (qtx, qty) = layout.q(t, i);
                    let (qnx, qny) = layout.q(t + 1, i);
                    // rows of R(-theta)
                    let (st, ct) = th_t.sin_cos();
                    let (sn, cn) = th_n.sin_cos();
                    // x row
                    grad.clear();
                    grad.push((qtx, ct));
                    grad.push((qty, st));
                    grad.push((layout.obj(t, 0), -ct));
                    grad.push((layout.obj(t, 1), -st));
                    grad.push((layout.obj(t, 2), p_t.y));
                    grad.push((qnx, -cn));
                    grad.push((qny, -sn));
                    grad.push((layout.obj(t + 1, 0), cn));
                    grad.push((layout.obj(t + 1, 1), sn));
                    grad.push((layout.obj(t + 1, 2), -p_n.y));
                    sink.eq_row(r.x, &grad);
                    // y row
                    grad.clear();
                    grad.push((qtx, -st));
                    grad.push((qty, ct));
                    grad.push((layout.obj(t, 0), st));
                    grad.push((layout.obj(t, 1), -ct));
                    grad.push((layout.obj(t, 2), -p_t.x));
                    grad.push((qnx, sn));
                    grad.push((qny, -cn));
                    grad.push((layout.obj(t + 1, 0), -sn));
                    grad.push((layout.obj(t + 1, 1), cn));
                    grad.push((layout.obj(t + 1, 2), p_n.x));
                    sink.eq_row(r.y, &grad);
                }
            }
            TaskKind::Rotor => {
                let y_t = s_t.object.rotation();
                let y_n = s_n.object.rotation();
                for i in mode.contact_fingers() {
                    let q_t = s_t.fingers[i];
                    let q_n = s_n.fingers[i];
                    let r = wrap_angle((q_n.angle() - y_n) - (q_t.angle() - y_t));
                    let (qtx, qty) = layout.q(t, i);
                    let (qnx, qny) = layout.q(t + 1, i);
                    let rt2 = q_t.norm_sq().max(1e-12);
                    let rn2 = q_n.norm_sq().max(1e-12);
                    grad.clear();
                    grad.push((qnx, -q_n.y / rn2));
                    grad.push((qny, q_n.x / rn2));
                    grad.push((layout.obj(t + 1, 0), -1.0));
                    grad.push((qtx, q_t.y / rt2));
                    grad.push((qty, -q_t.x / rt2));
                    grad.push((layout.obj(t, 0), 1.0));
                    sink.eq_row(r, &grad);
                }
            }
        }
    }

    // quasi-static balance
    for (t, s) in states.iter().enumerate() {
        match task.id {
            TaskKind::Card => {
                let th = s.object.rotation();
                let c = s.object.xy();
                // force rows
                for axis in 0..2 {
                    grad.clear();
                    let mut val = z[layout.env(t, axis)];
                    grad.push((layout.env(t, axis), 1.0));
                    for i in mode.contact_fingers() {
                        let (fx, fy) = layout.f(t, i);
                        let idx = if axis == 0 { fx } else { fy };
                        val += z[idx];
                        grad.push((idx, 1.0));
                    }
                    sink.eq_row(val, &grad);
                }
                // torque row about the object origin
                grad.clear();
                let mut tau = z[layout.env(t, 2)];
                grad.push((layout.env(t, 2), 1.0));
                for i in mode.contact_fingers() {
                    let p = (s.fingers[i] - c).rot(-th);
                    let (fx, fy) = layout.f(t, i);
                    let f = v2(z[fx], z[fy]);
                    tau += p.cross(f);
                    grad.push((fx, -p.y));
                    grad.push((fy, p.x));
                    // d tau / d p = (f.y, -f.x); chain p = R(-th)(q - c)
                    let dp = v2(f.y, -f.x);
                    let dq = dp.rot(th);
                    let (qx, qy) = layout.q(t, i);
                    grad.push((qx, dq.x));
                    grad.push((qy, dq.y));
                    grad.push((layout.obj(t, 0), -dq.x));
                    grad.push((layout.obj(t, 1), -dq.y));
                    grad.push((layout.obj(t, 2), dp.dot(-p.perp())));
                }
                sink.eq_row(tau, &grad);
            }
            TaskKind::Rotor => {
                let yaw = s.object.rotation();
                grad.clear();
                let mut tau = z[layout.env(t, 0)];
                grad.push((layout.env(t, 0), 1.0));
                for i in mode.contact_fingers() {
                    let p = s.fingers[i].rot(-yaw);
                    let (fx, fy) = layout.f(t, i);
                    let f = v2(z[fx], z[fy]);
                    tau += p.cross(f);
                    grad.push((fx, -p.y));
                    grad.push((fy, p.x));
                    let dp = v2(f.y, -f.x);
                    let dq = dp.rot(yaw);
                    let (qx, qy) = layout.q(t, i);
                    grad.push((qx, dq.x));
                    grad.push((qy, dq.y));
                    grad.push((layout.obj(t, 0), dp.dot(-p.perp())));
                }
                sink.eq_row(tau, &grad);
            }
        }
    }

    // terminal regrasp on-surface equality
    {
        let t = h - 1;
        let s = &states[t];
        for i in mode.regrasp_fingers() {
            let sd = signed_distance_grad(task, s.fingers[i], &s.object);
            grad.clear();
            let (qx, qy) = layout.q(t, i);
            grad.push((qx, sd.d_q.x));
            grad.push((qy, sd.d_q.y));
            for (k, dk) in sd.d_object.iter().enumerate() {
                grad.push((layout.obj(t, k), *dk));
            }
            sink.eq_row(sd.value, &grad);
        }
    }

    // control consistency for every finger
    for t in 0..h - 1 {
        for i in 0..task.n_f {
            let (qtx, qty) = layout.q(t, i);
            let (qnx, qny) = layout.q(t + 1, i);
            let (dx, dy) = layout.dq(t, i);
            grad.clear();
            grad.push((qtx, 1.0));
            grad.push((dx, 1.0));
            grad.push((qnx, -1.0));
            sink.eq_row(z[qtx] + z[dx] - z[qnx], &grad);
            grad.clear();
            grad.push((qty, 1.0));
            grad.push((dy, 1.0));
            grad.push((qny, -1.0));
            sink.eq_row(z[qty] + z[dy] - z[qny], &grad);
        }
    }

    // friction cones
    for (t, s) in states.iter().enumerate() {
        for i in mode.contact_fingers() {
            let (fx, fy) = layout.f(t, i);
            let f = v2(z[fx], z[fy]);
            match task.id {
                TaskKind::Card => {
                    // surface frame is constant in object coordinates:
                    // f_n = -f.y, f_t = f.x
                    grad.clear();
                    grad.push((fx, sign(f.x)));
                    grad.push((fy, task.mu));
                    sink.ineq_row(f.x.abs() + task.mu * f.y, &grad);
                    grad.clear();
                    grad.push((fy, 1.0));
                    sink.ineq_row(f.y, &grad);
                }
                TaskKind::Rotor => {
                    let yaw = s.object.rotation();
                    let p = s.fingers[i].rot(-yaw);
                    let rho = p.norm().max(1e-9);
                    let n = p * (1.0 / rho);
                    let m = n.perp();
                    let ft = f.dot(m);
                    let fn_in = -f.dot(n);
                    // d n / d p = (I - n n^T) / rho, d m / d p = Sk (dn/dp)
                    // rows below chain p = R(-yaw) q
                    let dfn_dp = -(f - n * n.dot(f)) * (1.0 / rho);
                    let sk_f = f.perp();
                    let dft_dp = -(sk_f - n * n.dot(sk_f)) * (1.0 / rho);
                    let (qx, qy) = layout.q(t, i);

                    // row: |f_t| - mu f_n
                    grad.clear();
                    let sgn = sign(ft);
                    let df = m * sgn + n * task.mu; // d/d f:  sign * m - mu * d(f_n)/df = sign*m + mu*n
                    grad.push((fx, df.x));
                    grad.push((fy, df.y));
                    let dp_comb = dft_dp * sgn - dfn_dp * task.mu;
                    let dq = dp_comb.rot(yaw);
                    grad.push((qx, dq.x));
                    grad.push((qy, dq.y));
                    grad.push((layout.obj(t, 0), dp_comb.dot(-p.perp())));
                    sink.ineq_row(ft.abs() - task.mu * fn_in, &grad);

                    // row: -f_n = f . n
                    grad.clear();
                    grad.push((fx, n.x));
                    grad.push((fy, n.y));
                    let dq2 = (dfn_dp * -1.0).rot(yaw);
                    grad.push((qx, dq2.x));
                    grad.push((qy, dq2.y));
                    grad.push((layout.obj(t, 0), (dfn_dp * -1.0).dot(-p.perp())));
                    sink.ineq_row(-fn_in, &grad);
                }
            }
        }
        if task.id == TaskKind::Card {
            let (e0, e1) = (layout.env(t, 0), layout.env(t, 1));
            let fe = v2(z[e0], z[e1]);
            let nrm = fe.norm();
            grad.clear();
            if nrm > 1e-12 {
                grad.push((e0, fe.x / nrm));
                grad.push((e1, fe.y / nrm));
            }
            sink.ineq_row(nrm - task.f_e_max, &grad);
        }
    }

    // regrasp clearance window
    let pad = problem.clearance_pad();
    if h > 2 * pad {
        for t in pad..h - pad {
            let s = &states[t];
            for i in mode.regrasp_fingers() {
                let sd = signed_distance_grad(task, s.fingers[i], &s.object);
                grad.clear();
                let (qx, qy) = layout.q(t, i);
                grad.push((qx, -sd.d_q.x));
                grad.push((qy, -sd.d_q.y));
                for (k, dk) in sd.d_object.iter().enumerate() {
                    grad.push((layout.obj(t, k), -dk));
                }
                sink.ineq_row(task.delta + clearance_margin - sd.value, &grad);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn counts(problem: &ModeProblem, layout: &Layout) -> ConstraintCounts {
    let z = vec![0.1; layout.flat()];
    let mut c = Counter { n_eq: 0, n_ineq: 0 };
    visit_rows(problem, layout, &z, 0.0, &mut c);
    ConstraintCounts {
        n_eq: c.n_eq,
        n_ineq: c.n_ineq,
    }
}

/// Reported constraint stacks for a trajectory: `(equalities, inequalities)`
/// with inequalities satisfied when `<= 0`. Includes the projection-enforced
/// workspace and control bounds.
pub fn constraint_residuals(problem: &ModeProblem, traj: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let layout = Layout::new(problem.task);
    let z = crate::types::flatten(traj, &layout.dims).expect("trajectory matches task dims");
    let mut col = Collector {
        eq: Vec::new(),
        ineq: Vec::new(),
    };
    visit_rows(problem, &layout, &z, 0.0, &mut col);
    col.ineq.extend(bound_residuals(problem, traj));
    (col.eq, col.ineq)
}

/// Workspace and control-bound residuals (inequalities, satisfied when <= 0).
pub fn bound_residuals(problem: &ModeProblem, traj: &Trajectory) -> Vec<f64> {
    let task = problem.task;
    let mut out = Vec::new();
    for s in &traj.states {
        for (i, ws) in task.workspaces.iter().enumerate() {
            let q = s.fingers[i];
            match ws {
                Workspace::Box { min, max } => {
                    out.push(min.x - q.x);
                    out.push(q.x - max.x);
                    out.push(min.y - q.y);
                    out.push(q.y - max.y);
                }
                Workspace::Sector {
                    phi_min,
                    phi_max,
                    rho_min,
                    rho_max,
                } => {
                    let rho = q.norm();
                    let phi = q.angle();
                    out.push(phi_min - phi);
                    out.push(phi - phi_max);
                    out.push(rho_min - rho);
                    out.push(rho - rho_max);
                }
            }
        }
    }
    for u in &traj.controls {
        for d in &u.dq {
            out.push(d.x.abs() - task.dq_max);
            out.push(d.y.abs() - task.dq_max);
        }
        for f in &u.f {
            out.push(f.x.abs() - task.f_max);
            out.push(f.y.abs() - task.f_max);
        }
        for e in &u.env {
            out.push(e.abs() - task.f_max);
        }
    }
    out
}

/// Augmented-Lagrangian objective value and gradient at fixed multipliers.
/// This is the function the inner gradient descent minimizes; exposed for
/// gradient verification.
pub fn penalty_objective(
    problem: &ModeProblem,
    cfg: &OptConfig,
    z: &[f64],
    lambda: &[f64],
    mu: &[f64],
    rho: f64,
    clearance_margin: f64,
    grad: &mut [f64],
) -> f64 {
    let layout = Layout::new(problem.task);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let cost = cost_value_grad(problem, &layout, z, cfg, grad);
    let mut acc = AlAccum {
        lambda,
        mu,
        rho,
        value: cost,
        grad,
        i_eq: 0,
        i_ineq: 0,
    };
    visit_rows(problem, &layout, z, clearance_margin, &mut acc);
    acc.value
}

/// Gauss-Newton diagonal of the augmented-Lagrangian at `z`: for each
/// variable, sum of `rho * (dh/dv)^2` over equality rows, the same over
/// active inequality rows, plus the quadratic cost curvature. Used as a
/// Jacobi preconditioner; constraint gradients differ by orders of
/// magnitude between position and angle channels.
struct DiagSink<'a> {
    mu: &'a [f64],
    rho: f64,
    diag: &'a mut [f64],
    i_ineq: usize,
}

impl RowSink for DiagSink<'_> {
    fn eq_row(&mut self, _h: f64, grad: &[(usize, f64)]) {
        for &(idx, g) in grad {
            self.diag[idx] += self.rho * g * g;
        }
    }

    fn ineq_row(&mut self, g_val: f64, grad: &[(usize, f64)]) {
        let s = (self.mu[self.i_ineq] + self.rho * g_val).max(0.0);
        if s > 0.0 {
            for &(idx, g) in grad {
                self.diag[idx] += self.rho * g * g;
            }
        }
        self.i_ineq += 1;
    }
}

pub(crate) fn gauss_newton_diag(
    problem: &ModeProblem,
    cfg: &OptConfig,
    layout: &Layout,
    z: &[f64],
    mu: &[f64],
    rho: f64,
    clearance_margin: f64,
) -> Vec<f64> {
    let mut diag = vec![0.0; layout.flat()];
    {
        let mut sink = DiagSink {
            mu,
            rho,
            diag: &mut diag,
            i_ineq: 0,
        };
        visit_rows(problem, layout, z, clearance_margin, &mut sink);
    }
    // quadratic cost curvature
    let h = layout.dims.h;
    for k in 0..layout.dims.d_o {
        diag[layout.obj(h - 1, k)] += 2.0 * cfg.w_goal;
    }
    for i in problem.mode().regrasp_fingers() {
        let (qx, qy) = layout.q(h - 1, i);
        diag[qx] += 2.0 * cfg.w_regrasp;
        diag[qy] += 2.0 * cfg.w_regrasp;
    }
    for t in 0..h {
        for i in 0..layout.dims.n_f {
            let (ax, ay) = layout.dq(t, i);
            diag[ax] += 2.0 * cfg.w_smooth;
            diag[ay] += 2.0 * cfg.w_smooth;
            let (fx, fy) = layout.f(t, i);
            diag[fx] += 2.0 * cfg.w_force;
            diag[fy] += 2.0 * cfg.w_force;
        }
        for k in 0..layout.dims.d_env {
            let e = layout.env(t, k);
            diag[e] += 2.0 * cfg.w_force;
        }
    }
    diag
}

/// Residual magnitudes used for feasibility decisions: max |equality| and
/// max positive inequality over the solver stack (bounds excluded; they are
/// projection-exact).
pub(crate) fn solver_residual_maxima(problem: &ModeProblem, layout: &Layout, z: &[f64]) -> (f64, f64) {
    let mut col = Collector {
        eq: Vec::new(),
        ineq: Vec::new(),
    };
    visit_rows(problem, layout, z, 0.0, &mut col);
    let max_eq = col.eq.iter().fold(0.0f64, |a, h| a.max(h.abs()));
    let max_ineq = col.ineq.iter().fold(0.0f64, |a, g| a.max(*g));
    (max_eq, max_ineq)
}

/// Raw equality and inequality stacks for multiplier updates.
pub(crate) fn solver_stacks(
    problem: &ModeProblem,
    layout: &Layout,
    z: &[f64],
    clearance_margin: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut col = Collector {
        eq: Vec::new(),
        ineq: Vec::new(),
    };
    visit_rows(problem, layout, z, clearance_margin, &mut col);
    (col.eq, col.ineq)
}
