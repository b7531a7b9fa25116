//! Projected-gradient augmented-Lagrangian solver with best-of-set
//! candidate selection.

use super::constraints::{counts, penalty_objective, solver_residual_maxima, solver_stacks};
use super::cost::total_cost;
use super::{Layout, ModeProblem, OptConfig};
use crate::error::{DipsError, Result};
use crate::types::{unflatten, State, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptReport {
    pub feasible: bool,
    pub final_cost: f64,
    pub max_eq_residual: f64,
    pub max_ineq_residual: f64,
    pub outer_iters: usize,
    pub inner_steps_accepted: usize,
    /// Index of the initialization that produced the returned trajectory.
    pub candidate: usize,
    pub candidates_aborted: usize,
    /// Final cost after each outer iteration of the winning candidate.
    pub cost_curve: Vec<f64>,
    /// Max equality residual after each outer iteration of the winner.
    pub residual_curve: Vec<f64>,
    pub wall_time_s: f64,
}

struct Candidate {
    z: Vec<f64>,
    cost: f64,
    max_eq: f64,
    max_ineq: f64,
    feasible: bool,
    accepted_steps: usize,
    cost_curve: Vec<f64>,
    residual_curve: Vec<f64>,
}

/// Mask of decision variables the solver may move: everything except the
/// clamped first state and the contact forces of regrasping fingers.
fn free_mask(problem: &ModeProblem, layout: &Layout) -> Vec<bool> {
    let mut mask = vec![true; layout.flat()];
    for k in 0..layout.dims.d_s() {
        mask[k] = false;
    }
    for t in 0..layout.dims.h {
        for i in problem.mode().regrasp_fingers() {
            let (fx, fy) = layout.f(t, i);
            mask[fx] = false;
            mask[fy] = false;
        }
    }
    mask
}

/// Project onto workspaces and control bounds (free entries only; the
/// clamped first state is never touched).
fn project(problem: &ModeProblem, layout: &Layout, z: &mut [f64]) {
    let task = problem.task;
    for t in 1..layout.dims.h {
        for (i, ws) in task.workspaces.iter().enumerate() {
            let (qx, qy) = layout.q(t, i);
            let clipped = ws.clip(crate::geom::v2(z[qx], z[qy]));
            z[qx] = clipped.x;
            z[qy] = clipped.y;
        }
    }
    for t in 0..layout.dims.h {
        for i in 0..task.n_f {
            let (dx, dy) = layout.dq(t, i);
            z[dx] = z[dx].clamp(-task.dq_max, task.dq_max);
            z[dy] = z[dy].clamp(-task.dq_max, task.dq_max);
            let (fx, fy) = layout.f(t, i);
            if problem.mode().in_contact(i) {
                z[fx] = z[fx].clamp(-task.f_max, task.f_max);
                z[fy] = z[fy].clamp(-task.f_max, task.f_max);
            } else {
                z[fx] = 0.0;
                z[fy] = 0.0;
            }
        }
        for k in 0..layout.dims.d_env {
            let e = layout.env(t, k);
            z[e] = z[e].clamp(-task.f_max, task.f_max);
        }
    }
}

fn run_candidate(
    problem: &ModeProblem,
    layout: &Layout,
    cfg: &OptConfig,
    s0: &State,
    init: &Trajectory,
) -> Option<Candidate> {
    let n = layout.flat();
    let mut z = crate::types::flatten(init, &layout.dims).ok()?;
    // clamp s_1 := s_0
    let mut s0_vec = vec![0.0; layout.dims.d_s()];
    s0.write_into(&mut s0_vec);
    z[..layout.dims.d_s()].copy_from_slice(&s0_vec);
    project(problem, layout, &mut z);

    let cts = counts(problem, layout);
    let mut lambda = vec![0.0; cts.n_eq];
    let mut mu = vec![0.0; cts.n_ineq];
    let mut rho = cfg.rho0;
    let mask = free_mask(problem, layout);
    let margin = cfg.clearance_margin;

    let mut grad = vec![0.0; n];
    let mut accepted = 0usize;
    let mut cost_curve = Vec::with_capacity(cfg.outer_iters);
    let mut residual_curve = Vec::with_capacity(cfg.outer_iters);

    for _outer in 0..cfg.outer_iters {
        // Jacobi preconditioner from the Gauss-Newton diagonal; constraint
        // gradients differ by orders of magnitude between channels
        let diag = super::constraints::gauss_newton_diag(problem, cfg, layout, &z, &mu, rho, margin);
        let max_diag = diag.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let precond: Vec<f64> = diag
            .iter()
            .map(|d| 1.0 / (d + 1e-6 * max_diag))
            .collect();

        let mut value = penalty_objective(problem, cfg, &z, &lambda, &mu, rho, margin, &mut grad);
        if !value.is_finite() {
            return None;
        }
        // trial step grows after accepted steps so the preconditioned step
        // ramps toward the Newton scale (1.0) from the configured start;
        // heavy-ball momentum accelerates the coupled chain modes and is
        // reset whenever a step has to backtrack
        let mut step = cfg.step_size;
        let mut velocity = vec![0.0; n];
        for _step in 0..cfg.inner_steps {
            for (g, &m) in grad.iter_mut().zip(&mask) {
                if !m {
                    *g = 0.0;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return None;
            }
            let gnorm_sq: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm_sq < 1e-24 {
                break;
            }
            for i in 0..n {
                velocity[i] = cfg.momentum * velocity[i] + precond[i] * grad[i];
            }
            let mut improved = false;
            let mut trial = vec![0.0; n];
            let mut trial_grad = vec![0.0; n];
            let mut restarted = false;
            for _ in 0..=cfg.max_halvings {
                trial.copy_from_slice(&z);
                for (i, t) in trial.iter_mut().enumerate() {
                    if mask[i] {
                        *t -= step * velocity[i];
                    }
                }
                project(problem, layout, &mut trial);
                let tv =
                    penalty_objective(problem, cfg, &trial, &lambda, &mu, rho, margin, &mut trial_grad);
                if tv.is_finite() && tv < value {
                    z.copy_from_slice(&trial);
                    grad.copy_from_slice(&trial_grad);
                    value = tv;
                    improved = true;
                    accepted += 1;
                    step = (step * 2.0).min(1.0);
                    break;
                }
                if !restarted {
                    // drop the momentum first, then start halving the step
                    restarted = true;
                    for (v, (&g, &p)) in velocity.iter_mut().zip(grad.iter().zip(&precond)) {
                        *v = p * g;
                    }
                } else {
                    step *= 0.5;
                }
            }
            if !improved {
                break;
            }
        }

        let (h, g) = solver_stacks(problem, layout, &z, margin);
        for (l, hv) in lambda.iter_mut().zip(&h) {
            *l += rho * hv;
        }
        for (m, gv) in mu.iter_mut().zip(&g) {
            *m = (*m + rho * gv).max(0.0);
        }
        rho = (rho * cfg.rho_growth).min(cfg.rho_max);

        let traj = unflatten(&z, &layout.dims).ok()?;
        cost_curve.push(total_cost(problem, &traj, cfg));
        let (max_eq, _) = solver_residual_maxima(problem, layout, &z);
        residual_curve.push(max_eq);
    }

    let (max_eq, max_ineq) = solver_residual_maxima(problem, layout, &z);
    let traj = unflatten(&z, &layout.dims).ok()?;
    let cost = total_cost(problem, &traj, cfg);
    if !cost.is_finite() {
        return None;
    }
    Some(Candidate {
        z,
        cost,
        max_eq,
        max_ineq,
        feasible: max_eq <= cfg.tolerance && max_ineq <= cfg.tolerance,
        accepted_steps: accepted,
        cost_curve,
        residual_curve,
    })
}

/// Optimize a mode segment from a set of initializations, returning the
/// feasible candidate with the lowest cost, or failing feasibility the
/// candidate with the smallest maximum residual. Each initialization's
/// first state is overwritten with `s0`.
pub fn optimize(
    problem: &ModeProblem,
    s0: &State,
    init: &[Trajectory],
    cfg: &OptConfig,
) -> Result<(Trajectory, OptReport)> {
    if init.is_empty() {
        return Err(DipsError::Config("optimize requires at least one initialization".into()));
    }
    let layout = Layout::new(problem.task);
    let start = std::time::Instant::now();

    let results: Vec<Option<Candidate>> = init
        .par_iter()
        .map(|tr| run_candidate(problem, &layout, cfg, s0, tr))
        .collect();

    let aborted = results.iter().filter(|r| r.is_none()).count();
    let mut best: Option<(usize, &Candidate)> = None;
    for (i, cand) in results.iter().enumerate() {
        let Some(c) = cand else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                // (feasible, cost) then (max residual) ordering, index-stable
                if c.feasible != b.feasible {
                    c.feasible
                } else if c.feasible {
                    c.cost < b.cost
                } else {
                    c.max_eq.max(c.max_ineq) < b.max_eq.max(b.max_ineq)
                }
            }
        };
        if better {
            best = Some((i, c));
        }
    }
    let Some((idx, winner)) = best else {
        return Err(DipsError::NonFinite(
            "all optimization candidates diverged".into(),
        ));
    };

    let traj = unflatten(&winner.z, &layout.dims)?;
    debug_assert_eq!(traj.first_state(), s0);
    let report = OptReport {
        feasible: winner.feasible,
        final_cost: winner.cost,
        max_eq_residual: winner.max_eq,
        max_ineq_residual: winner.max_ineq,
        outer_iters: cfg.outer_iters,
        inner_steps_accepted: winner.accepted_steps,
        candidate: idx,
        candidates_aborted: aborted,
        cost_curve: winner.cost_curve.clone(),
        residual_curve: winner.residual_curve.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((traj, report))
}
