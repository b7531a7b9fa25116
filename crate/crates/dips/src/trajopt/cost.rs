//! Segment objective: goal tracking, regrasp target attraction, smoothness
//! and force regularization.

use super::{Layout, ModeProblem, OptConfig};
use crate::domain::Geometry;
use crate::geom::v2;
use crate::types::{ObjectPose, Trajectory};

/// J(tau) = w_goal * |o_H - o_target|^2
///        + w_regrasp * sum_i |q_{i,H} - target_i(o_H)|^2   (regrasp fingers)
///        + w_smooth * sum_t |dq_t|^2
///        + w_force * sum_t (|f_t|^2 + |u_env,t|^2),
/// with o_target = o_1 + the mode's goal displacement.
pub fn total_cost(problem: &ModeProblem, traj: &Trajectory, cfg: &OptConfig) -> f64 {
    let goal_delta = &problem.goal().delta;
    let o1 = traj.first_state().object.to_vec();
    let oh = traj.last_state().object.to_vec();
    let mut cost = 0.0;

    let mut goal_sq = 0.0;
    for k in 0..oh.len() {
        let d = oh[k] - (o1[k] + goal_delta[k]);
        goal_sq += d * d;
    }
    cost += cfg.w_goal * goal_sq;

    let last = traj.last_state();
    for i in problem.mode().regrasp_fingers() {
        let p = problem
            .task
            .target_point(problem.targets, i, &last.object);
        cost += cfg.w_regrasp * (last.fingers[i] - p).norm_sq();
    }

    for u in &traj.controls {
        for d in &u.dq {
            cost += cfg.w_smooth * d.norm_sq();
        }
        for f in &u.f {
            cost += cfg.w_force * f.norm_sq();
        }
        for e in &u.env {
            cost += cfg.w_force * e * e;
        }
    }
    cost
}

/// Cost over the flat decision vector, accumulating the gradient.
pub(crate) fn cost_value_grad(
    problem: &ModeProblem,
    layout: &Layout,
    z: &[f64],
    cfg: &OptConfig,
    grad: &mut [f64],
) -> f64 {
    let h = layout.dims.h;
    let d_o = layout.dims.d_o;
    let mut cost = 0.0;

    // goal term: o_target is constant (o_1 is clamped to s0)
    let t_last = h - 1;
    let goal_delta = &problem.goal().delta;
    let mut goal_sq = 0.0;
    for k in 0..d_o {
        let target = z[layout.obj(0, k)] + goal_delta[k];
        let d = z[layout.obj(t_last, k)] - target;
        goal_sq += d * d;
        grad[layout.obj(t_last, k)] += cfg.w_goal * 2.0 * d;
        // o_1 is clamped; its gradient entry is masked out by the solver
        grad[layout.obj(0, k)] -= cfg.w_goal * 2.0 * d;
    }
    cost += cfg.w_goal * goal_sq;

    // regrasp targets at the final step
    let last_state = layout.state_at(z, t_last);
    for i in problem.mode().regrasp_fingers() {
        let p = problem
            .task
            .target_point(problem.targets, i, &last_state.object);
        let q = last_state.fingers[i];
        let e = q - p;
        cost += cfg.w_regrasp * e.norm_sq();
        let (qx, qy) = layout.q(t_last, i);
        grad[qx] += cfg.w_regrasp * 2.0 * e.x;
        grad[qy] += cfg.w_regrasp * 2.0 * e.y;
        // target depends on the final object pose
        match (&problem.task.geometry, &last_state.object) {
            (Geometry::Card { height, .. }, ObjectPose::Card { theta, .. }) => {
                // p = c + R(theta) * local; dp/dc = I, dp/dtheta = perp(R local)
                let local = v2(problem.targets.0[i], height / 2.0);
                let world_arm = local.rot(*theta);
                grad[layout.obj(t_last, 0)] -= cfg.w_regrasp * 2.0 * e.x;
                grad[layout.obj(t_last, 1)] -= cfg.w_regrasp * 2.0 * e.y;
                grad[layout.obj(t_last, 2)] -=
                    cfg.w_regrasp * 2.0 * e.dot(world_arm.perp());
            }
            (Geometry::Rotor { .. }, ObjectPose::Rotor { .. }) => {
                // world-frame target, independent of yaw
            }
            _ => unreachable!(),
        }
    }

    // smoothness + force regularization
    for t in 0..h {
        for i in 0..layout.dims.n_f {
            let (ax, ay) = layout.dq(t, i);
            cost += cfg.w_smooth * (z[ax] * z[ax] + z[ay] * z[ay]);
            grad[ax] += cfg.w_smooth * 2.0 * z[ax];
            grad[ay] += cfg.w_smooth * 2.0 * z[ay];
            let (fx, fy) = layout.f(t, i);
            cost += cfg.w_force * (z[fx] * z[fx] + z[fy] * z[fy]);
            grad[fx] += cfg.w_force * 2.0 * z[fx];
            grad[fy] += cfg.w_force * 2.0 * z[fy];
        }
        for k in 0..layout.dims.d_env {
            let e = layout.env(t, k);
            cost += cfg.w_force * z[e] * z[e];
            grad[e] += cfg.w_force * 2.0 * z[e];
        }
    }

    cost
}
