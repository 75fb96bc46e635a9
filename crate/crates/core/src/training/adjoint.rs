//! Reverse-mode gradients through the substepped rollout, and the
//! finite-difference oracle used to check them.

use crate::error::{Error, Result};
use crate::sim::{self, ContactBranch, PhysParams, Vec3};

use super::losses::{chamfer_loss_impl, prior_loss_grad, total_loss, tracking_loss_impl, LossBreakdown, LossWeights};
use super::{flat_params, params_from_flat, FitProblem, ParamGradients};

/// Pre-step states and contact branches of every substep.
struct Tape {
    x: Vec<Vec3>,
    v: Vec<Vec3>,
    branches: Vec<ContactBranch>,
}

fn forward(problem: &FitProblem, params: &PhysParams, mut tape: Option<&mut Tape>) -> Result<Vec<Vec<Vec3>>> {
    let config = &problem.config;
    let n = problem.initial.len();
    let frames = problem.frames;
    let s = config.substeps;
    let masses = &problem.initial.masses;
    let mut x = problem.initial.positions.clone();
    let mut v = problem.initial.velocities.clone();
    let mut forces = Vec::with_capacity(n);
    let mut ctrl = Vec::new();
    let mut branches = vec![ContactBranch::Free; n];
    let uses_ctrl = !problem.graph.controller_edges.is_empty();
    if let Some(tape) = tape.as_deref_mut() {
        let steps = frames.saturating_sub(1) * s;
        tape.x.reserve(steps * n);
        tape.v.reserve(steps * n);
        tape.branches.reserve(steps * n);
    }
    let mut traj = Vec::with_capacity(frames);
    traj.push(x.clone());
    for t in 0..frames.saturating_sub(1) {
        for k in 0..s {
            if uses_ctrl {
                problem.controllers.interpolate_into(t, (k + 1) as f64 / s as f64, &mut ctrl);
            }
            if let Some(tape) = tape.as_deref_mut() {
                tape.x.extend_from_slice(&x);
                tape.v.extend_from_slice(&v);
            }
            sim::substep(
                &mut x,
                &mut v,
                masses,
                &problem.graph,
                params,
                &ctrl,
                config,
                &mut forces,
                Some(&mut branches),
            )
            .map_err(|e| match e {
                Error::NonFiniteForce { .. } => Error::Unstable { frame: t + 1 },
                other => other,
            })?;
            if !sim::check_bounds(&x, config.instability_bound) {
                return Err(Error::Unstable { frame: t + 1 });
            }
            if let Some(tape) = tape.as_deref_mut() {
                tape.branches.extend_from_slice(&branches);
            }
        }
        traj.push(x.clone());
    }
    Ok(traj)
}

fn log_stiffness_by_part(problem: &FitProblem, params: &PhysParams) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let groups = problem.intra_edges();
    let logs = groups
        .iter()
        .map(|g| g.iter().map(|&e| params.edge_stiffness[e].ln()).collect())
        .collect();
    (groups, logs)
}

/// Loss components on a trajectory; optionally accumulates d(total)/d(x_t).
fn trajectory_losses(
    problem: &FitProblem,
    params: &PhysParams,
    weights: &LossWeights,
    traj: &[Vec<Vec3>],
    mut dx: Option<&mut [Vec<Vec3>]>,
) -> Result<(LossBreakdown, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let frames = problem.frames;
    let tracking = if problem.tracked_indices.is_empty() {
        0.0
    } else {
        tracking_loss_impl(
            traj,
            &problem.tracked_indices,
            &problem.tracked_targets,
            frames,
            dx.as_deref_mut().map(|g| (g, weights.lambda_trk)),
        )?
    };
    let chamfer = chamfer_loss_impl(traj, &problem.clouds, frames, dx.map(|g| (g, weights.lambda_cham)))?;
    let (groups, logs) = log_stiffness_by_part(problem, params);
    let mut dlog: Vec<Vec<f64>> = logs.iter().map(|g| vec![0.0; g.len()]).collect();
    let prior = prior_loss_grad(&logs, &problem.priors, &mut dlog)?;
    let total = total_loss(weights, tracking, chamfer, prior);
    Ok((
        LossBreakdown {
            tracking,
            chamfer,
            prior,
            total,
        },
        groups,
        dlog,
    ))
}

/// Forward rollout and loss without gradients; parameter ranges are not checked.
pub fn evaluate_loss(problem: &FitProblem, params: &PhysParams, weights: &LossWeights) -> Result<LossBreakdown> {
    let traj = forward(problem, params, None)?;
    Ok(trajectory_losses(problem, params, weights, &traj, None)?.0)
}

/// Loss and its exact gradient with respect to all physical parameters.
///
/// The forward pass stores every substep's state and contact branch; the
/// backward pass replays forces from the stored states and propagates
/// position/velocity adjoints through contact, integration and forces.
pub fn rollout_grad(
    problem: &FitProblem,
    params: &PhysParams,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ParamGradients)> {
    problem.validate()?;
    params.validate(problem.graph.edges.len())?;
    weights.validate()?;
    let n = problem.initial.len();
    let frames = problem.frames;
    let mut tape = Tape {
        x: Vec::new(),
        v: Vec::new(),
        branches: Vec::new(),
    };
    let traj = forward(problem, params, Some(&mut tape))?;
    let mut dx = vec![vec![Vec3::zeros(); n]; frames];
    let (loss, groups, dlog) = trajectory_losses(problem, params, weights, &traj, Some(&mut dx))?;

    let mut grad = ParamGradients::zeros(problem.graph.edges.len());
    for (g, d) in groups.iter().zip(&dlog) {
        for (&e, &dl) in g.iter().zip(d) {
            grad.edge_stiffness[e] += weights.lambda_prior * dl / params.edge_stiffness[e];
        }
    }
    if frames < 2 {
        return Ok((loss, grad));
    }

    let graph = &problem.graph;
    let config = &problem.config;
    let s = config.substeps;
    let h = config.step_dt();
    let gravity = config.gravity();
    let masses = &problem.initial.masses;
    let (delta, gamma, kc) = (params.drag_damping, params.dashpot_damping, params.controller_stiffness);
    let (mu, eps) = (params.friction, params.elasticity);
    let uses_ctrl = !graph.controller_edges.is_empty();

    let mut ax = std::mem::take(&mut dx[frames - 1]);
    let mut av = vec![Vec3::zeros(); n];
    let mut ax_prev = vec![Vec3::zeros(); n];
    let mut av_prev = vec![Vec3::zeros(); n];
    let mut a_force = vec![Vec3::zeros(); n];
    let mut forces = Vec::with_capacity(n);
    let mut ctrl = Vec::new();

    for t in (0..frames - 1).rev() {
        for k in (0..s).rev() {
            let step = t * s + k;
            let x = &tape.x[step * n..(step + 1) * n];
            let v = &tape.v[step * n..(step + 1) * n];
            let branches = &tape.branches[step * n..(step + 1) * n];
            if uses_ctrl {
                problem.controllers.interpolate_into(t, (k + 1) as f64 / s as f64, &mut ctrl);
            }
            sim::accumulate_forces(x, v, masses, graph, params, &ctrl, gravity, &mut forces)?;

            for i in 0..n {
                let pre_drag = v[i] + forces[i] * (h / masses[i]);
                let v_tilde = pre_drag * delta;
                let mut ax_t = ax[i];
                let mut av_t = av[i];
                if branches[i] != ContactBranch::Free {
                    ax_t.z = 0.0;
                    let out = av[i];
                    let mut a_vz = -eps * out.z;
                    grad.elasticity -= v_tilde.z * out.z;
                    let (mut a_tx, mut a_ty) = (out.x, out.y);
                    match branches[i] {
                        ContactBranch::Sliding => {
                            let r = (v_tilde.x * v_tilde.x + v_tilde.y * v_tilde.y).sqrt();
                            let (ux, uy) = (v_tilde.x / r, v_tilde.y / r);
                            let c = mu * (1.0 + eps) * v_tilde.z;
                            let ua = ux * out.x + uy * out.y;
                            a_tx = out.x + c / r * (out.x - ux * ua);
                            a_ty = out.y + c / r * (out.y - uy * ua);
                            a_vz += mu * (1.0 + eps) * ua;
                            grad.friction += (1.0 + eps) * v_tilde.z * ua;
                            grad.elasticity += mu * v_tilde.z * ua;
                        }
                        ContactBranch::Stuck => {
                            a_tx = 0.0;
                            a_ty = 0.0;
                        }
                        _ => {}
                    }
                    av_t = Vec3::new(a_tx, a_ty, a_vz);
                }
                let a_vtilde = av_t + ax_t * h;
                grad.drag_damping += a_vtilde.dot(&pre_drag);
                av_prev[i] = a_vtilde * delta;
                a_force[i] = a_vtilde * (delta * h / masses[i]);
                ax_prev[i] = ax_t;
            }

            for (e, edge) in graph.edges.iter().enumerate() {
                let (i, j) = (edge.i, edge.j);
                let g = a_force[i] - a_force[j];
                let d = x[j] - x[i];
                let len = d.norm();
                let u = d / len;
                let ug = u.dot(&g);
                let l = edge.rest_length;
                let kk = params.edge_stiffness[e];
                let jg = (g * (1.0 - l / len) + u * (ug * l / len)) * kk;
                ax_prev[j] += jg;
                ax_prev[i] -= jg;
                grad.edge_stiffness[e] += (len - l) * ug;
                av_prev[i] -= g * gamma;
                av_prev[j] += g * gamma;
                grad.dashpot_damping -= (v[i] - v[j]).dot(&g);
            }
            for ce in &graph.controller_edges {
                let p = ce.point;
                let d = ctrl[ce.controller] - x[p];
                let len = d.norm();
                if len == 0.0 {
                    continue;
                }
                let u = d / len;
                let a = a_force[p];
                let ua = u.dot(&a);
                let l = ce.rest_length;
                ax_prev[p] -= (a * (1.0 - l / len) + u * (ua * l / len)) * kc;
                grad.controller_stiffness += (len - l) * ua;
            }
            std::mem::swap(&mut ax, &mut ax_prev);
            std::mem::swap(&mut av, &mut av_prev);
        }
        for (a, d) in ax.iter_mut().zip(&dx[t]) {
            *a += d;
        }
        let finite = ax.iter().chain(&av).all(|a| a.iter().all(|c| c.is_finite()));
        if !finite || !grad.is_finite() {
            return Err(Error::NonFiniteGradient { frame: t });
        }
    }
    Ok((loss, grad))
}

/// Central difference of `f` at `x`. In log space the probe points are
/// `x·exp(±h)` and the result is converted back to d f / d x.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64, log_space: bool) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    if log_space && x > 0.0 {
        let up = f(x * h.exp())?;
        let down = f(x * (-h).exp())?;
        Ok((up - down) / (2.0 * h) / x)
    } else {
        let step = if x != 0.0 { h * x.abs() } else { h };
        let up = f(x + step)?;
        let down = f(x - step)?;
        Ok((up - down) / (2.0 * step))
    }
}

/// Finite-difference gradient of the total loss, one central difference per
/// scalar parameter; stiffnesses and γ are probed in log space.
pub fn finite_diff_grad(
    problem: &FitProblem,
    params: &PhysParams,
    weights: &LossWeights,
    h: f64,
) -> Result<ParamGradients> {
    problem.validate()?;
    params.validate(problem.graph.edges.len())?;
    let base = flat_params(params);
    let e = params.edge_stiffness.len();
    let mut out = vec![0.0; base.len()];
    for (q, slot) in out.iter_mut().enumerate() {
        // Edge stiffness, controller stiffness and γ are log-space probes.
        let log_space = q <= e + 1;
        *slot = central_difference(
            |val| {
                let mut p = base.clone();
                p[q] = val;
                Ok(evaluate_loss(problem, &params_from_flat(&p), weights)?.total)
            },
            base[q],
            h,
            log_space,
        )?;
    }
    Ok(ParamGradients {
        edge_stiffness: out[..e].to_vec(),
        controller_stiffness: out[e],
        dashpot_damping: out[e + 1],
        drag_damping: out[e + 2],
        friction: out[e + 3],
        elasticity: out[e + 4],
    })
}
