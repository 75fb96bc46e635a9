//! Spring-mass dynamics.
//!
//! A step computes per-point forces from springs, dashpots and gravity,
//! advances velocities and positions with drag-damped explicit Euler and then
//! applies a velocity-level ground-plane contact response. Controller points
//! are kinematic: they have prescribed positions and pull on the object only
//! through their attachment springs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::KdTree;

pub type Vec3 = Vector3<f64>;

/// Rest lengths of controller attachments never drop below this.
pub const MIN_REST_LENGTH: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct MassState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub masses: Vec<f64>,
}

impl MassState {
    pub fn new(positions: Vec<Vec3>, velocities: Vec<Vec3>, masses: Vec<f64>) -> Result<Self> {
        let state = MassState {
            positions,
            velocities,
            masses,
        };
        state.validate()?;
        Ok(state)
    }

    /// Points at rest with uniform masses summing to `total_mass`.
    pub fn at_rest(positions: Vec<Vec3>, total_mass: f64) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::invalid("mass state needs at least one point"));
        }
        let m = total_mass / n as f64;
        Self::new(positions, vec![Vec3::zeros(); n], vec![m; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::invalid("mass state needs at least one point"));
        }
        if self.velocities.len() != n {
            return Err(Error::dims("velocities", n, self.velocities.len()));
        }
        if self.masses.len() != n {
            return Err(Error::dims("masses", n, self.masses.len()));
        }
        for (i, (x, v)) in self.positions.iter().zip(&self.velocities).enumerate() {
            if !x.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite {
                    path: format!("positions[{i}]"),
                });
            }
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite {
                    path: format!("velocities[{i}]"),
                });
            }
        }
        for (i, &m) in self.masses.iter().enumerate() {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::validation(format!("masses[{i}]"), "mass must be finite and > 0"));
            }
        }
        Ok(())
    }

    pub fn momentum(&self) -> Vec3 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, &m)| v * m)
            .sum()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, &m)| 0.5 * m * v.norm_squared())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Both endpoints lie in the given part.
    Intra(usize),
    /// Endpoints lie in different parts.
    Boundary,
}

/// Spring between two mass points, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    pub rest_length: f64,
}

/// Spring between a kinematic controller point and a mass point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerEdge {
    pub controller: usize,
    pub point: usize,
    pub rest_length: f64,
}

/// Part-labelled point set plus its springs.
///
/// Object springs and controller attachments are kept in separate lists;
/// `PhysParams::edge_stiffness` is indexed like `edges`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringGraph {
    pub point_count: usize,
    pub part_of: Vec<usize>,
    pub num_parts: usize,
    pub edges: Vec<Edge>,
    pub controller_edges: Vec<ControllerEdge>,
    pub controller_count: usize,
}

impl SpringGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.point_count;
        if self.part_of.len() != n {
            return Err(Error::dims("part_of", n, self.part_of.len()));
        }
        if let Some(i) = self.part_of.iter().position(|&p| p >= self.num_parts) {
            return Err(Error::validation(format!("part_of[{i}]"), "part index out of range"));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for (e, edge) in self.edges.iter().enumerate() {
            let path = format!("edges[{e}]");
            if edge.i >= edge.j {
                return Err(Error::validation(path, "edge must satisfy i < j"));
            }
            if edge.j >= n {
                return Err(Error::validation(path, "endpoint out of range"));
            }
            if !(edge.rest_length > 0.0 && edge.rest_length.is_finite()) {
                return Err(Error::validation(path, "rest length must be > 0"));
            }
            if !seen.insert((edge.i, edge.j)) {
                return Err(Error::validation(path, "duplicate edge"));
            }
            let (pi, pj) = (self.part_of[edge.i], self.part_of[edge.j]);
            match edge.kind {
                EdgeKind::Intra(p) if pi != p || pj != p => {
                    return Err(Error::validation(path, "intra edge endpoints must lie in its part"));
                }
                EdgeKind::Boundary if pi == pj => {
                    return Err(Error::validation(path, "boundary edge must span two parts"));
                }
                _ => {}
            }
        }
        for (e, ce) in self.controller_edges.iter().enumerate() {
            let path = format!("controller_edges[{e}]");
            if ce.controller >= self.controller_count || ce.point >= n {
                return Err(Error::validation(path, "index out of range"));
            }
            if !(ce.rest_length > 0.0 && ce.rest_length.is_finite()) {
                return Err(Error::validation(path, "rest length must be > 0"));
            }
        }
        if !self.is_connected() {
            return Err(Error::validation("edges", "object springs must connect all points"));
        }
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        crate::topology::UnionFind::from_edges(
            self.point_count,
            self.edges.iter().map(|e| (e.i, e.j)),
        )
        .components()
            <= 1
    }

    /// Number of object springs incident to each point.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.point_count];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// N/m, one per object edge.
    pub edge_stiffness: Vec<f64>,
    /// N/m, shared by all controller attachments.
    pub controller_stiffness: f64,
    /// Dashpot coefficient γ, N·s/m.
    pub dashpot_damping: f64,
    /// Per-step velocity multiplier δ in (0, 1].
    pub drag_damping: f64,
    /// Coulomb friction μ.
    pub friction: f64,
    /// Restitution ε in [0, 1].
    pub elasticity: f64,
}

impl PhysParams {
    pub fn uniform(edge_count: usize, stiffness: f64) -> Self {
        PhysParams {
            edge_stiffness: vec![stiffness; edge_count],
            controller_stiffness: stiffness,
            dashpot_damping: 0.0,
            drag_damping: 1.0,
            friction: 0.0,
            elasticity: 0.0,
        }
    }

    pub fn validate(&self, edge_count: usize) -> Result<()> {
        if self.edge_stiffness.len() != edge_count {
            return Err(Error::dims("edge_stiffness", edge_count, self.edge_stiffness.len()));
        }
        if let Some(e) = self
            .edge_stiffness
            .iter()
            .position(|k| !(k.is_finite() && *k > 0.0))
        {
            return Err(Error::validation(format!("edge_stiffness[{e}]"), "must be finite and > 0"));
        }
        let checks = [
            ("controller_stiffness", self.controller_stiffness > 0.0),
            ("dashpot_damping", self.dashpot_damping >= 0.0),
            ("drag_damping", self.drag_damping > 0.0 && self.drag_damping <= 1.0),
            ("friction", self.friction >= 0.0),
            ("elasticity", (0.0..=1.0).contains(&self.elasticity)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::validation(name, "out of range"));
            }
        }
        let scalars = [
            self.controller_stiffness,
            self.dashpot_damping,
            self.drag_damping,
            self.friction,
            self.elasticity,
        ];
        if !scalars.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                path: "params".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Seconds per frame.
    pub dt: f64,
    pub substeps: usize,
    pub gravity: [f64; 3],
    pub ground_height: f64,
    pub contact_enabled: bool,
    /// Abort once any coordinate magnitude exceeds this many meters.
    pub instability_bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / 60.0,
            substeps: 10,
            gravity: [0.0, 0.0, -9.81],
            ground_height: 0.0,
            contact_enabled: true,
            instability_bound: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("dt", "must be > 0"));
        }
        if self.substeps == 0 {
            return Err(Error::validation("substeps", "must be >= 1"));
        }
        Ok(())
    }

    /// Integration step length.
    pub fn step_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }

    /// Free-space configuration: no gravity and no ground.
    pub fn free(dt: f64, substeps: usize) -> Self {
        SimConfig {
            dt,
            substeps,
            gravity: [0.0; 3],
            contact_enabled: false,
            ..Default::default()
        }
    }
}

/// Prescribed controller trajectories, `positions[c][t]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerTrack {
    pub positions: Vec<Vec<Vec3>>,
}

impl ControllerTrack {
    pub fn new(positions: Vec<Vec<Vec3>>) -> Result<Self> {
        let track = ControllerTrack { positions };
        track.validate()?;
        Ok(track)
    }

    pub fn empty() -> Self {
        ControllerTrack::default()
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    /// Frames covered; `usize::MAX` for an empty track.
    pub fn frames(&self) -> usize {
        self.positions.iter().map(Vec::len).min().unwrap_or(usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, traj) in self.positions.iter().enumerate() {
            if traj.is_empty() {
                return Err(Error::validation(format!("controllers[{c}]"), "needs at least one frame"));
            }
            if traj.len() != self.positions[0].len() {
                return Err(Error::dims(format!("controllers[{c}] frames"), self.positions[0].len(), traj.len()));
            }
            if let Some(t) = traj.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFinite {
                    path: format!("controllers[{c}][{t}]"),
                });
            }
        }
        Ok(())
    }

    pub fn at_frame(&self, frame: usize) -> Vec<Vec3> {
        self.positions.iter().map(|traj| traj[frame]).collect()
    }

    /// Linear interpolation between `frame` and `frame + 1`.
    pub fn interpolate_into(&self, frame: usize, alpha: f64, out: &mut Vec<Vec3>) {
        out.clear();
        out.extend(self.positions.iter().map(|traj| {
            let a = traj[frame];
            let b = traj[(frame + 1).min(traj.len() - 1)];
            a + (b - a) * alpha
        }));
    }

    pub fn truncated(&self, frames: usize) -> ControllerTrack {
        ControllerTrack {
            positions: self
                .positions
                .iter()
                .map(|t| t[..frames.min(t.len())].to_vec())
                .collect(),
        }
    }
}

/// Force on `xi` from a spring to `xj`.
pub fn spring_force(xi: &Vec3, xj: &Vec3, k: f64, l: f64) -> Result<Vec3> {
    spring_force_indexed(xi, xj, k, l, 0, 1)
}

#[inline]
fn spring_force_indexed(xi: &Vec3, xj: &Vec3, k: f64, l: f64, i: usize, j: usize) -> Result<Vec3> {
    let d = xj - xi;
    let len = d.norm();
    if len == 0.0 {
        return Err(Error::DegenerateEdge { i, j });
    }
    Ok(d * (k * (len - l) / len))
}

/// Dashpot force on point `i`.
pub fn dashpot_force(vi: &Vec3, vj: &Vec3, gamma: f64) -> Vec3 {
    -(vi - vj) * gamma
}

/// Sum of spring, dashpot and gravity forces on every mass point.
///
/// `controllers` holds the current controller positions and must be
/// non-empty exactly when the graph has controller edges.
pub fn total_forces(
    state: &MassState,
    graph: &SpringGraph,
    params: &PhysParams,
    controllers: &[Vec3],
    config: &SimConfig,
) -> Result<Vec<Vec3>> {
    if state.len() != graph.point_count {
        return Err(Error::dims("mass points", graph.point_count, state.len()));
    }
    if params.edge_stiffness.len() != graph.edges.len() {
        return Err(Error::dims("edge_stiffness", graph.edges.len(), params.edge_stiffness.len()));
    }
    if !graph.controller_edges.is_empty() && controllers.len() < graph.controller_count {
        return Err(Error::dims("controller positions", graph.controller_count, controllers.len()));
    }
    let mut forces = Vec::with_capacity(state.len());
    accumulate_forces(
        &state.positions,
        &state.velocities,
        &state.masses,
        graph,
        params,
        controllers,
        config.gravity(),
        &mut forces,
    )?;
    Ok(forces)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_forces(
    x: &[Vec3],
    v: &[Vec3],
    masses: &[f64],
    graph: &SpringGraph,
    params: &PhysParams,
    controllers: &[Vec3],
    gravity: Vec3,
    forces: &mut Vec<Vec3>,
) -> Result<()> {
    forces.clear();
    forces.extend(masses.iter().map(|&m| gravity * m));
    let gamma = params.dashpot_damping;
    for (edge, &k) in graph.edges.iter().zip(&params.edge_stiffness) {
        let (i, j) = (edge.i, edge.j);
        let f = spring_force_indexed(&x[i], &x[j], k, edge.rest_length, i, j)?
            + dashpot_force(&v[i], &v[j], gamma);
        forces[i] += f;
        forces[j] -= f;
    }
    let kc = params.controller_stiffness;
    for ce in &graph.controller_edges {
        let p = ce.point;
        let d = controllers[ce.controller] - x[p];
        let len = d.norm();
        if len == 0.0 {
            // Kinematic endpoint sits on the point: no defined direction.
            continue;
        }
        forces[p] += d * (kc * (len - ce.rest_length) / len);
    }
    Ok(())
}

/// Drag-damped explicit Euler update.
pub fn integrate_step(
    state: &MassState,
    forces: &[Vec3],
    params: &PhysParams,
    config: &SimConfig,
) -> Result<MassState> {
    if forces.len() != state.len() {
        return Err(Error::dims("forces", state.len(), forces.len()));
    }
    let mut next = state.clone();
    integrate_in_place(
        &mut next.positions,
        &mut next.velocities,
        &state.masses,
        forces,
        params.drag_damping,
        config.step_dt(),
    )?;
    Ok(next)
}

pub(crate) fn integrate_in_place(
    x: &mut [Vec3],
    v: &mut [Vec3],
    masses: &[f64],
    forces: &[Vec3],
    drag: f64,
    h: f64,
) -> Result<()> {
    for (i, f) in forces.iter().enumerate() {
        if !f.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteForce { point: i });
        }
        v[i] = (v[i] + f * (h / masses[i])) * drag;
        x[i] += v[i] * h;
    }
    Ok(())
}

/// Which branch of the contact rule a point took in a substep.
///
/// Recorded in the forward pass so the adjoint can replay the same
/// piecewise-smooth map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[repr(u8)]
pub enum ContactBranch {
    #[default]
    Free = 0,
    /// Tangential velocity scaled by a positive factor.
    Sliding = 1,
    /// Friction removed all tangential velocity.
    Stuck = 2,
    /// Normal impact with zero tangential velocity.
    Normal = 3,
}

/// Velocity-level ground-plane response (plane normal +z).
pub fn resolve_ground_contact(state: &MassState, mu: f64, eps: f64, ground_height: f64) -> MassState {
    let mut next = state.clone();
    contact_in_place(&mut next.positions, &mut next.velocities, mu, eps, ground_height, None);
    next
}

pub(crate) fn contact_in_place(
    x: &mut [Vec3],
    v: &mut [Vec3],
    mu: f64,
    eps: f64,
    ground: f64,
    mut branches: Option<&mut [ContactBranch]>,
) {
    for i in 0..x.len() {
        let mut branch = ContactBranch::Free;
        if x[i].z < ground && v[i].z < 0.0 {
            x[i].z = ground;
            let vn = v[i].z;
            let vn_new = -eps * vn;
            let dvn = (vn_new - vn).abs();
            v[i].z = vn_new;
            let vt = (v[i].x * v[i].x + v[i].y * v[i].y).sqrt();
            if vt > 0.0 {
                let scale = 1.0 - mu * dvn / vt;
                if scale > 0.0 {
                    v[i].x *= scale;
                    v[i].y *= scale;
                    branch = ContactBranch::Sliding;
                } else {
                    v[i].x = 0.0;
                    v[i].y = 0.0;
                    branch = ContactBranch::Stuck;
                }
            } else {
                branch = ContactBranch::Normal;
            }
        }
        if let Some(b) = branches.as_deref_mut() {
            b[i] = branch;
        }
    }
}

/// Attaches each controller to its `n_attach` nearest mass points.
///
/// Ties are broken by lower point index; rest lengths are the frame-0
/// distances floored at [`MIN_REST_LENGTH`].
pub fn attach_controllers(
    state: &MassState,
    controller_positions: &[Vec3],
    n_attach: usize,
) -> Result<Vec<ControllerEdge>> {
    if n_attach == 0 {
        return Err(Error::invalid("n_attach must be >= 1"));
    }
    if controller_positions.is_empty() {
        return Err(Error::invalid("at least one controller is required"));
    }
    let tree = KdTree::build(&state.positions);
    let mut edges = Vec::with_capacity(controller_positions.len() * n_attach);
    for (c, p) in controller_positions.iter().enumerate() {
        for (point, dist) in tree.nearest_k(p, n_attach) {
            edges.push(ControllerEdge {
                controller: c,
                point,
                rest_length: dist.max(MIN_REST_LENGTH),
            });
        }
    }
    Ok(edges)
}

/// Output of [`rollout`]: `trajectory[t][i]` is point `i` at frame `t`.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Vec<Vec<Vec3>>,
    pub final_state: MassState,
}

/// Reusable scratch buffers for stepping one system.
#[derive(Debug, Default, Clone)]
pub(crate) struct StepScratch {
    pub forces: Vec<Vec3>,
    pub controllers: Vec<Vec3>,
}

/// One substep: forces, Euler update, contact.
#[allow(clippy::too_many_arguments)]
pub(crate) fn substep(
    x: &mut [Vec3],
    v: &mut [Vec3],
    masses: &[f64],
    graph: &SpringGraph,
    params: &PhysParams,
    controllers: &[Vec3],
    config: &SimConfig,
    forces: &mut Vec<Vec3>,
    branches: Option<&mut [ContactBranch]>,
) -> Result<()> {
    accumulate_forces(x, v, masses, graph, params, controllers, config.gravity(), forces)?;
    integrate_in_place(x, v, masses, forces, params.drag_damping, config.step_dt())?;
    if config.contact_enabled {
        contact_in_place(
            x,
            v,
            params.friction,
            params.elasticity,
            config.ground_height,
            branches,
        );
    } else if let Some(b) = branches {
        b.fill(ContactBranch::Free);
    }
    Ok(())
}

pub(crate) fn check_bounds(x: &[Vec3], bound: f64) -> bool {
    x.iter().all(|p| p.iter().all(|c| c.is_finite() && c.abs() <= bound))
}

pub(crate) fn check_rollout_inputs(
    initial: &MassState,
    graph: &SpringGraph,
    params: &PhysParams,
    controllers: &ControllerTrack,
    frames: usize,
    config: &SimConfig,
) -> Result<()> {
    config.validate()?;
    initial.validate()?;
    params.validate(graph.edges.len())?;
    if frames == 0 {
        return Err(Error::invalid("rollout needs at least one frame"));
    }
    if initial.len() != graph.point_count {
        return Err(Error::dims("mass points", graph.point_count, initial.len()));
    }
    if !graph.controller_edges.is_empty() {
        if controllers.count() < graph.controller_count {
            return Err(Error::dims("controllers", graph.controller_count, controllers.count()));
        }
        if controllers.frames() < frames {
            return Err(Error::dims("controller frames", frames, controllers.frames()));
        }
    }
    Ok(())
}

/// Simulates `frames` frames; frame 0 is the initial state.
pub fn rollout(
    initial: &MassState,
    graph: &SpringGraph,
    params: &PhysParams,
    controllers: &ControllerTrack,
    frames: usize,
    config: &SimConfig,
) -> Result<Rollout> {
    check_rollout_inputs(initial, graph, params, controllers, frames, config)?;
    let mut x = initial.positions.clone();
    let mut v = initial.velocities.clone();
    let mut scratch = StepScratch::default();
    let mut trajectory = Vec::with_capacity(frames);
    trajectory.push(x.clone());
    let s = config.substeps;
    let uses_controllers = !graph.controller_edges.is_empty();
    for t in 0..frames - 1 {
        for k in 0..s {
            if uses_controllers {
                controllers.interpolate_into(t, (k + 1) as f64 / s as f64, &mut scratch.controllers);
            }
            substep(
                &mut x,
                &mut v,
                &initial.masses,
                graph,
                params,
                &scratch.controllers,
                config,
                &mut scratch.forces,
                None,
            )
            .map_err(|e| match e {
                Error::NonFiniteForce { .. } => Error::Unstable { frame: t + 1 },
                other => other,
            })?;
            if !check_bounds(&x, config.instability_bound) {
                return Err(Error::Unstable { frame: t + 1 });
            }
        }
        trajectory.push(x.clone());
    }
    Ok(Rollout {
        trajectory,
        final_state: MassState {
            positions: x,
            velocities: v,
            masses: initial.masses.clone(),
        },
    })
}

/// Kinetic plus elastic energy of the object springs.
pub fn mechanical_energy(state: &MassState, graph: &SpringGraph, params: &PhysParams) -> f64 {
    let elastic: f64 = graph
        .edges
        .iter()
        .zip(&params.edge_stiffness)
        .map(|(e, &k)| {
            let stretch = (state.positions[e.j] - state.positions[e.i]).norm() - e.rest_length;
            0.5 * k * stretch * stretch
        })
        .sum();
    state.kinetic_energy() + elastic
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn pair_graph(rest: f64) -> SpringGraph {
        SpringGraph {
            point_count: 2,
            part_of: vec![0, 0],
            num_parts: 1,
            edges: vec![Edge {
                i: 0,
                j: 1,
                kind: EdgeKind::Intra(0),
                rest_length: rest,
            }],
            controller_edges: vec![],
            controller_count: 0,
        }
    }

    #[test]
    fn spring_force_examples() {
        let o = Vec3::zeros();
        assert_eq!(spring_force(&o, &v(1.0, 0.0, 0.0), 10.0, 1.0).unwrap(), Vec3::zeros());
        assert_eq!(spring_force(&o, &v(2.0, 0.0, 0.0), 10.0, 1.0).unwrap(), v(10.0, 0.0, 0.0));
        assert_eq!(spring_force(&o, &v(2.0, 0.0, 0.0), 10.0, 3.0).unwrap(), v(-10.0, 0.0, 0.0));
    }

    #[test]
    fn spring_force_is_antisymmetric() {
        let a = v(0.3, -1.2, 0.7);
        let b = v(-0.4, 0.1, 2.0);
        let fa = spring_force(&a, &b, 37.0, 0.5).unwrap();
        let fb = spring_force(&b, &a, 37.0, 0.5).unwrap();
        assert!((fa + fb).norm() < 1e-12);
    }

    #[test]
    fn coincident_points_are_an_error() {
        let p = v(1.0, 2.0, 3.0);
        assert!(matches!(
            spring_force(&p, &p, 1.0, 1.0),
            Err(Error::DegenerateEdge { .. })
        ));
    }

    #[test]
    fn dashpot_examples() {
        let w = v(3.0, 1.0, 2.0);
        assert_eq!(dashpot_force(&w, &w, 5.0), Vec3::zeros());
        assert_eq!(dashpot_force(&v(1.0, 0.0, 0.0), &Vec3::zeros(), 2.0), v(-2.0, 0.0, 0.0));
        let (a, b) = (v(0.2, -3.0, 1.0), v(4.0, 0.5, -0.25));
        assert_eq!(dashpot_force(&a, &b, 1.7) + dashpot_force(&b, &a, 1.7), Vec3::zeros());
    }

    #[test]
    fn isolated_point_feels_gravity() {
        let state = MassState::at_rest(vec![Vec3::zeros()], 1.0).unwrap();
        let graph = SpringGraph {
            point_count: 1,
            part_of: vec![0],
            num_parts: 1,
            edges: vec![],
            controller_edges: vec![],
            controller_count: 0,
        };
        let params = PhysParams::uniform(0, 1.0);
        let f = total_forces(&state, &graph, &params, &[], &SimConfig::default()).unwrap();
        assert_eq!(f, vec![v(0.0, 0.0, -9.81)]);
    }

    #[test]
    fn pair_at_rest_length_has_no_force() {
        let state = MassState::at_rest(vec![Vec3::zeros(), v(1.0, 0.0, 0.0)], 2.0).unwrap();
        let params = PhysParams::uniform(1, 50.0);
        let f = total_forces(&state, &pair_graph(1.0), &params, &[], &SimConfig::free(0.01, 1)).unwrap();
        assert!(f.iter().all(|f| *f == Vec3::zeros()));
    }

    #[test]
    fn degenerate_edge_propagates_from_total_forces() {
        let state = MassState::at_rest(vec![Vec3::zeros(), Vec3::zeros()], 2.0).unwrap();
        let params = PhysParams::uniform(1, 50.0);
        let err = total_forces(&state, &pair_graph(1.0), &params, &[], &SimConfig::free(0.01, 1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateEdge { i: 0, j: 1 }));
    }

    #[test]
    fn integrate_examples() {
        let cfg = SimConfig::free(0.01, 1);
        let mut params = PhysParams::uniform(0, 1.0);
        let state = MassState::new(vec![Vec3::zeros()], vec![v(1.0, 0.0, 0.0)], vec![1.0]).unwrap();
        let next = integrate_step(&state, &[Vec3::zeros()], &params, &cfg).unwrap();
        assert_eq!(next.velocities[0], v(1.0, 0.0, 0.0));
        assert_eq!(next.positions[0], v(0.01, 0.0, 0.0));

        params.drag_damping = 0.5;
        let next = integrate_step(&state, &[Vec3::zeros()], &params, &cfg).unwrap();
        assert_eq!(next.velocities[0], v(0.5, 0.0, 0.0));

        params.drag_damping = 1.0;
        let cfg = SimConfig::free(0.1, 1);
        let state = MassState::new(vec![Vec3::zeros()], vec![Vec3::zeros()], vec![2.0]).unwrap();
        let next = integrate_step(&state, &[v(0.0, 0.0, -4.0)], &params, &cfg).unwrap();
        assert!((next.velocities[0] - v(0.0, 0.0, -0.2)).norm() < 1e-12);
        assert!((next.positions[0] - v(0.0, 0.0, -0.02)).norm() < 1e-12);
        assert_eq!(next.masses, vec![2.0]);
    }

    #[test]
    fn non_finite_force_names_the_point() {
        let state = MassState::at_rest(vec![Vec3::zeros(), Vec3::zeros()], 1.0).unwrap();
        let forces = [Vec3::zeros(), v(f64::NAN, 0.0, 0.0)];
        let err = integrate_step(&state, &forces, &PhysParams::uniform(0, 1.0), &SimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteForce { point: 1 }));
    }

    #[test]
    fn contact_examples() {
        let above = MassState::new(vec![v(0.0, 0.0, 1.0)], vec![v(0.0, 0.0, -1.0)], vec![1.0]).unwrap();
        assert_eq!(resolve_ground_contact(&above, 0.5, 0.5, 0.0), above);

        let s = MassState::new(vec![v(0.0, 0.0, -0.01)], vec![v(0.0, 0.0, -1.0)], vec![1.0]).unwrap();
        let r = resolve_ground_contact(&s, 0.0, 0.0, 0.0);
        assert_eq!(r.positions[0], Vec3::zeros());
        assert_eq!(r.velocities[0], Vec3::zeros());

        let s = MassState::new(vec![v(0.0, 0.0, -0.01)], vec![v(1.0, 0.0, -1.0)], vec![1.0]).unwrap();
        let r = resolve_ground_contact(&s, 0.0, 1.0, 0.0);
        assert_eq!(r.positions[0], Vec3::zeros());
        assert_eq!(r.velocities[0], v(1.0, 0.0, 1.0));
    }

    #[test]
    fn contact_leaves_separating_points_alone() {
        let s = MassState::new(vec![v(0.0, 0.0, -0.1)], vec![v(1.0, 0.0, 0.5)], vec![1.0]).unwrap();
        assert_eq!(resolve_ground_contact(&s, 1.0, 0.5, 0.0), s);
    }

    #[test]
    fn friction_clamps_tangential_velocity() {
        // |dv_n| = 1, |v_t| = 0.5, mu = 1 -> scale clamps to zero.
        let s = MassState::new(vec![v(0.0, 0.0, -0.1)], vec![v(0.5, 0.0, -1.0)], vec![1.0]).unwrap();
        let r = resolve_ground_contact(&s, 1.0, 0.0, 0.0);
        assert_eq!(r.velocities[0], Vec3::zeros());
        // mu = 0.25 -> scale 0.5.
        let r = resolve_ground_contact(&s, 0.25, 0.0, 0.0);
        assert!((r.velocities[0] - v(0.25, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn attach_examples() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(0.0, 0.05, 0.0), v(3.0, 0.0, 0.0)];
        let state = MassState::at_rest(pts, 1.0).unwrap();
        let edges = attach_controllers(&state, &[v(0.0, 0.1, 0.0)], 1).unwrap();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].point, 2);
        assert!((edges[0].rest_length - 0.05).abs() < 1e-15);

        let edges = attach_controllers(&state, &[v(0.0, 0.1, 0.0)], 10).unwrap();
        let mut pts: Vec<_> = edges.iter().map(|e| e.point).collect();
        pts.sort();
        assert_eq!(pts, vec![0, 1, 2, 3]);
    }

    #[test]
    fn attach_tie_prefers_lower_index() {
        let mut pts: Vec<Vec3> = (0..10).map(|i| v(10.0 + i as f64, 5.0, 0.0)).collect();
        pts[3] = v(1.0, 0.0, 0.0);
        pts[7] = v(-1.0, 0.0, 0.0);
        let state = MassState::at_rest(pts, 1.0).unwrap();
        let edges = attach_controllers(&state, &[Vec3::zeros()], 1).unwrap();
        assert_eq!(edges[0].point, 3);
    }

    #[test]
    fn coincident_controller_gets_floored_rest_length() {
        let state = MassState::at_rest(vec![v(0.5, 0.5, 0.5), v(2.0, 0.0, 0.0)], 1.0).unwrap();
        let edges = attach_controllers(&state, &[v(0.5, 0.5, 0.5)], 1).unwrap();
        assert_eq!(edges[0].rest_length, MIN_REST_LENGTH);
    }

    #[test]
    fn single_frame_rollout_is_identity() {
        let state = MassState::at_rest(vec![Vec3::zeros(), v(1.5, 0.0, 0.0)], 2.0).unwrap();
        let params = PhysParams::uniform(1, 50.0);
        let out = rollout(&state, &pair_graph(1.0), &params, &ControllerTrack::empty(), 1, &SimConfig::default()).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(out.trajectory[0], state.positions);
    }

    #[test]
    fn two_step_chain_matches_hand_euler() {
        // k=100, l=1, stretched to 1.2, m=1, two steps of h=0.001.
        let state = MassState::new(
            vec![Vec3::zeros(), v(1.2, 0.0, 0.0)],
            vec![Vec3::zeros(); 2],
            vec![1.0, 1.0],
        )
        .unwrap();
        let params = PhysParams::uniform(1, 100.0);
        let cfg = SimConfig::free(0.001, 1);
        let out = rollout(&state, &pair_graph(1.0), &params, &ControllerTrack::empty(), 3, &cfg).unwrap();
        // step 1: F0 = +20, v0 = 0.02, x0 = 2e-5; x1 = 1.2 - 2e-5.
        // step 2: len = 1.19996, F0 = 19.996, v0 = 0.039996, x0 = 5.9996e-5.
        let x0 = [2e-5, 5.9996e-5];
        for (t, &expect) in x0.iter().enumerate() {
            let frame = &out.trajectory[t + 1];
            assert!((frame[0].x - expect).abs() < 1e-12);
            assert!((frame[1].x - (1.2 - expect)).abs() < 1e-12);
        }
    }

    #[test]
    fn unstable_rollout_reports_frame() {
        let state = MassState::new(
            vec![Vec3::zeros(), v(1.2, 0.0, 0.0)],
            vec![Vec3::zeros(); 2],
            vec![1e-3, 1e-3],
        )
        .unwrap();
        let params = PhysParams::uniform(1, 1e6);
        let cfg = SimConfig::free(0.01, 1);
        let err = rollout(&state, &pair_graph(1.0), &params, &ControllerTrack::empty(), 50, &cfg).unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }
}
