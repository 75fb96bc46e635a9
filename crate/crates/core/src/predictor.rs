//! Edge geometry and motion features, the decoders, and output squashing.

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::{Codebook, Interval, EMBEDDING_DIM, NUM_MATERIALS};
use crate::sim::{ControllerTrack, EdgeKind, SpringGraph, Vec3};

pub const GEO_DIM: usize = 10;
pub const MOTION_DIM: usize = 16;
pub const HIDDEN: usize = 64;
/// Global decoder outputs: dashpot, drag, friction, elasticity, controller stiffness.
pub const GLOBAL_OUTPUTS: usize = 5;

pub type GeometryFeature = [f64; GEO_DIM];
pub type MotionFeature = [f64; MOTION_DIM];

fn bounding_diagonal(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Geometry features for every object edge.
///
/// Layout: normalized rest length, current/rest length ratio, unit direction
/// (3), endpoint degrees over max degree (2), mean incident rest length at each
/// endpoint (2, normalized), boundary flag. Lengths are normalized by the
/// bounding-box diagonal of `positions`.
pub fn edge_geometry_features(graph: &SpringGraph, positions: &[Vec3]) -> Result<Vec<GeometryFeature>> {
    if positions.len() != graph.point_count {
        return Err(Error::dims("positions", graph.point_count, positions.len()));
    }
    let diag = bounding_diagonal(positions);
    let degree = graph.degrees();
    let max_degree = degree.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut incident = vec![0.0; graph.point_count];
    for e in &graph.edges {
        incident[e.i] += e.rest_length;
        incident[e.j] += e.rest_length;
    }
    let mean_incident = |p: usize| {
        if degree[p] == 0 { 0.0 } else { incident[p] / degree[p] as f64 / diag }
    };
    graph
        .edges
        .iter()
        .map(|e| {
            let d = positions[e.j] - positions[e.i];
            let len = d.norm();
            if len == 0.0 || e.rest_length <= 0.0 {
                return Err(Error::DegenerateEdge { i: e.i, j: e.j });
            }
            let u = d / len;
            Ok([
                e.rest_length / diag,
                len / e.rest_length,
                u.x,
                u.y,
                u.z,
                degree[e.i] as f64 / max_degree,
                degree[e.j] as f64 / max_degree,
                mean_incident(e.i),
                mean_incident(e.j),
                if e.kind == EdgeKind::Boundary { 1.0 } else { 0.0 },
            ])
        })
        .collect()
}

pub fn edge_geometry_feature(graph: &SpringGraph, positions: &[Vec3], edge: usize) -> Result<GeometryFeature> {
    if edge >= graph.edges.len() {
        return Err(Error::invalid(format!("edge {edge} out of range")));
    }
    Ok(edge_geometry_features(graph, positions)?[edge])
}

#[derive(Default)]
struct TrajStats {
    mean_speed: f64,
    max_speed: f64,
    mean_accel: f64,
    net_displacement: f64,
    path_length: f64,
    oscillation_rate: f64,
    net_vertical: f64,
}

fn trajectory_stats(trajs: &[&[Vec3]], dt: f64) -> TrajStats {
    if trajs.is_empty() {
        return TrajStats::default();
    }
    let mut s = TrajStats::default();
    let (mut speed_n, mut accel_n) = (0usize, 0usize);
    let mut crossings = 0usize;
    for traj in trajs {
        let t = traj.len();
        let duration = (t - 1) as f64 * dt;
        let vel: Vec<Vec3> = traj.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        for v in &vel {
            let sp = v.norm();
            s.mean_speed += sp;
            s.max_speed = s.max_speed.max(sp);
            speed_n += 1;
        }
        for w in vel.windows(2) {
            s.mean_accel += ((w[1] - w[0]) / dt).norm();
            accel_n += 1;
        }
        s.net_displacement += (traj[t - 1] - traj[0]).norm();
        s.net_vertical += traj[t - 1].z - traj[0].z;
        s.path_length += traj.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>();
        let mut rate = 0.0;
        for axis in 0..3 {
            let mut last = 0.0f64;
            let mut count = 0usize;
            for v in &vel {
                let c = v[axis];
                if c != 0.0 {
                    if last != 0.0 && c.signum() != last.signum() {
                        count += 1;
                    }
                    last = c;
                }
            }
            rate += count as f64 / duration;
        }
        crossings += 1;
        s.oscillation_rate += rate / 3.0;
    }
    let n = trajs.len() as f64;
    s.mean_speed /= speed_n.max(1) as f64;
    s.mean_accel /= accel_n.max(1) as f64;
    s.net_displacement /= n;
    s.net_vertical /= n;
    s.path_length /= n;
    s.oscillation_rate /= crossings.max(1) as f64;
    s
}

/// Hand-crafted motion descriptor standing in for a learned video embedding.
///
/// Entries 0..6 describe the controllers (mean speed, max speed, mean
/// acceleration magnitude, net displacement, path length, velocity sign
/// changes per second), 6..12 the same for tracked points, then duration,
/// controller count, and the mean net vertical displacement of controllers
/// and of tracked points. Velocities are forward differences over `dt`.
pub fn motion_descriptor(controllers: &ControllerTrack, tracked: &[Vec<Vec3>], dt: f64) -> Result<MotionFeature> {
    let frames = tracked
        .first()
        .map(Vec::len)
        .or_else(|| controllers.positions.first().map(Vec::len))
        .unwrap_or(0);
    if frames < 2 {
        return Err(Error::invalid("motion descriptor needs at least two frames"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be > 0"));
    }
    let ctrl: Vec<&[Vec3]> = controllers.positions.iter().map(|t| &t[..frames.min(t.len())]).collect();
    if ctrl.iter().any(|t| t.len() < 2) {
        return Err(Error::invalid("controller track needs at least two frames"));
    }
    let trk: Vec<&[Vec3]> = tracked.iter().map(|t| t.as_slice()).collect();
    if trk.iter().any(|t| t.len() != frames) {
        return Err(Error::invalid("tracked trajectories have inconsistent lengths"));
    }
    let c = trajectory_stats(&ctrl, dt);
    let p = trajectory_stats(&trk, dt);
    Ok([
        c.mean_speed,
        c.max_speed,
        c.mean_accel,
        c.net_displacement,
        c.path_length,
        c.oscillation_rate,
        p.mean_speed,
        p.max_speed,
        p.mean_accel,
        p.net_displacement,
        p.path_length,
        p.oscillation_rate,
        (frames - 1) as f64 * dt,
        controllers.count() as f64,
        c.net_vertical,
        p.net_vertical,
    ])
}

/// Per-dimension standardization statistics for motion features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for MotionStats {
    fn default() -> Self {
        MotionStats {
            mean: vec![0.0; MOTION_DIM],
            std: vec![1.0; MOTION_DIM],
        }
    }
}

impl MotionStats {
    /// Population statistics; near-constant dimensions get unit scale.
    pub fn fit(raw: &[MotionFeature]) -> Self {
        if raw.is_empty() {
            return MotionStats::default();
        }
        let n = raw.len() as f64;
        let mut mean = vec![0.0; MOTION_DIM];
        for r in raw {
            for k in 0..MOTION_DIM {
                mean[k] += r[k] / n;
            }
        }
        let std = (0..MOTION_DIM)
            .map(|k| {
                let var = raw.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-8 * (1.0 + mean[k].abs()) { s } else { 1.0 }
            })
            .collect();
        MotionStats { mean, std }
    }

    pub fn standardize(&self, raw: &MotionFeature) -> Vec<f64> {
        (0..MOTION_DIM).map(|k| (raw[k] - self.mean[k]) / self.std[k]).collect()
    }
}

/// Fully connected layer, `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; the output layer is shrunk by
    /// `output_scale` so fresh decoders start near the middle of their ranges.
    pub fn new(sizes: &[usize], rng: &mut impl Rng, output_scale: f64) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let scale = if l + 1 == n { output_scale } else { 1.0 };
                let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a) * scale);
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation(what, "network has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.ncols() {
                return Err(Error::validation(format!("{what}.layers[{l}]"), "bias length must match weight columns"));
            }
            if l > 0 && layer.weight.nrows() != self.layers[l - 1].weight.ncols() {
                return Err(Error::validation(format!("{what}.layers[{l}]"), "layer shapes are inconsistent"));
            }
            if !layer.weight.iter().chain(layer.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    path: format!("{what}.layers[{l}]"),
                });
            }
        }
        Ok(())
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("decoder input", self.input_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape");
        Ok(self.forward(&row)?.0.row(0).to_vec())
    }

    /// Gradients of parameters and inputs given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { weight: gw, bias: gb });
            let mut d_in = delta.dot(&self.layers[l].weight.t());
            if l > 0 {
                // input = tanh(z) of the previous layer.
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = d_in;
        }
        grads.reverse();
        (Mlp { layers: grads }, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    pub fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = src[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = src[k];
                k += 1;
            }
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    /// (motion, edge material, geometry) -> raw stiffness.
    pub edge: Mlp,
    /// (motion, global material) -> raw global parameters.
    pub global: Mlp,
}

impl DecoderWeights {
    pub fn new(material_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderWeights {
            edge: Mlp::new(&[MOTION_DIM + material_dim + GEO_DIM, HIDDEN, HIDDEN, 1], &mut rng, 0.1),
            global: Mlp::new(&[MOTION_DIM + material_dim, HIDDEN, GLOBAL_OUTPUTS], &mut rng, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    /// N/m, squashed in log space.
    pub stiffness: Interval,
    /// N/m, squashed in log space.
    pub controller_stiffness: Interval,
    /// Log space.
    pub damping: Interval,
    pub drag: Interval,
    pub friction: Interval,
    pub elasticity: Interval,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            stiffness: Interval::new(1.0, 1e5),
            controller_stiffness: Interval::new(10.0, 1e5),
            damping: Interval::new(1e-3, 50.0),
            drag: Interval::new(0.9, 1.0),
            friction: Interval::new(0.0, 2.0),
            elasticity: Interval::new(0.0, 1.0),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("ranges.stiffness", self.stiffness, self.stiffness.lo > 0.0),
            ("ranges.controller_stiffness", self.controller_stiffness, self.controller_stiffness.lo > 0.0),
            ("ranges.damping", self.damping, self.damping.lo > 0.0),
            ("ranges.drag", self.drag, self.drag.lo > 0.0 && self.drag.hi <= 1.0),
            ("ranges.friction", self.friction, self.friction.lo >= 0.0),
            ("ranges.elasticity", self.elasticity, self.elasticity.lo >= 0.0 && self.elasticity.hi <= 1.0),
        ];
        for (path, iv, ok) in checks {
            if !(iv.lo < iv.hi) || !ok || !iv.hi.is_finite() {
                return Err(Error::validation(path, "range must satisfy min < max within parameter bounds"));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `exp(ln lo + sigmoid(y) (ln hi - ln lo))` and its derivative in `y`.
pub fn log_squash(y: f64, range: &Interval) -> (f64, f64) {
    let (a, b) = (range.lo.ln(), range.hi.ln());
    let s = sigmoid(y);
    let v = (a + s * (b - a)).exp().clamp(range.lo, range.hi);
    (v, v * (b - a) * s * (1.0 - s))
}

/// `lo + sigmoid(y) (hi - lo)` and its derivative in `y`.
pub fn linear_squash(y: f64, range: &Interval) -> (f64, f64) {
    let s = sigmoid(y);
    ((range.lo + s * (range.hi - range.lo)).clamp(range.lo, range.hi), (range.hi - range.lo) * s * (1.0 - s))
}

/// Plain forward pass of a decoder.
pub fn decoder_forward(net: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    net.forward_one(input)
}

pub fn edge_decoder_input(z_vid: &[f64], z_mat: &[f64], z_geo: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(z_vid.len() + z_mat.len() + z_geo.len());
    x.extend_from_slice(z_vid);
    x.extend_from_slice(z_mat);
    x.extend_from_slice(z_geo);
    x
}

pub fn predict_edge_stiffness(
    z_vid: &[f64],
    z_mat_edge: &[f64],
    z_geo: &[f64],
    weights: &DecoderWeights,
    range: &Interval,
) -> Result<f64> {
    let y = decoder_forward(&weights.edge, &edge_decoder_input(z_vid, z_mat_edge, z_geo))?[0];
    Ok(log_squash(y, range).0)
}

/// Squash ranges for the global decoder's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRanges {
    pub damping: Interval,
    pub drag: Interval,
    pub friction: Interval,
    pub elasticity: Interval,
    pub controller_stiffness: Interval,
}

impl From<&ParamRanges> for GlobalRanges {
    fn from(r: &ParamRanges) -> Self {
        GlobalRanges {
            damping: r.damping,
            drag: r.drag,
            friction: r.friction,
            elasticity: r.elasticity,
            controller_stiffness: r.controller_stiffness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub dashpot_damping: f64,
    pub drag_damping: f64,
    pub friction: f64,
    pub elasticity: f64,
    pub controller_stiffness: f64,
}

/// Squashes raw global outputs; also returns d(value)/d(raw) per output.
pub fn squash_globals(raw: &[f64], ranges: &GlobalRanges) -> (GlobalParams, [f64; GLOBAL_OUTPUTS]) {
    let (g, dg) = log_squash(raw[0], &ranges.damping);
    let (d, dd) = linear_squash(raw[1], &ranges.drag);
    let (m, dm) = linear_squash(raw[2], &ranges.friction);
    let (e, de) = linear_squash(raw[3], &ranges.elasticity);
    let (k, dk) = log_squash(raw[4], &ranges.controller_stiffness);
    (
        GlobalParams {
            dashpot_damping: g,
            drag_damping: d,
            friction: m,
            elasticity: e,
            controller_stiffness: k,
        },
        [dg, dd, dm, de, dk],
    )
}

pub fn predict_globals(
    z_vid: &[f64],
    z_mat_global: &[f64],
    weights: &DecoderWeights,
    ranges: &GlobalRanges,
) -> Result<GlobalParams> {
    let mut x = z_vid.to_vec();
    x.extend_from_slice(z_mat_global);
    let raw = decoder_forward(&weights.global, &x)?;
    Ok(squash_globals(&raw, ranges).0)
}

/// Everything learnable plus the fixed squash ranges and feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub codebook: Codebook,
    pub decoders: DecoderWeights,
    pub ranges: ParamRanges,
    pub motion_stats: MotionStats,
    /// When false, decoders see the raw class distribution instead of the
    /// codebook embedding.
    pub use_codebook: bool,
}

impl Model {
    pub fn new(seed: u64, use_codebook: bool) -> Self {
        let codebook = Codebook::init(NUM_MATERIALS, EMBEDDING_DIM, seed);
        let material_dim = if use_codebook { EMBEDDING_DIM } else { NUM_MATERIALS };
        Model {
            codebook,
            decoders: DecoderWeights::new(material_dim, seed.wrapping_add(1)),
            ranges: ParamRanges::default(),
            motion_stats: MotionStats::default(),
            use_codebook,
        }
    }

    pub fn material_dim(&self) -> usize {
        if self.use_codebook { self.codebook.dim() } else { self.codebook.classes() }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoders.edge.validate("decoders.edge")?;
        self.decoders.global.validate("decoders.global")?;
        self.ranges.validate()?;
        let md = self.material_dim();
        if self.decoders.edge.input_dim() != MOTION_DIM + md + GEO_DIM || self.decoders.edge.output_dim() != 1 {
            return Err(Error::validation("decoders.edge", "input/output dimensions do not match the feature layout"));
        }
        if self.decoders.global.input_dim() != MOTION_DIM + md || self.decoders.global.output_dim() != GLOBAL_OUTPUTS {
            return Err(Error::validation("decoders.global", "input/output dimensions do not match the feature layout"));
        }
        let dim = self.codebook.dim();
        if self.codebook.entries.iter().any(|e| e.len() != dim) {
            return Err(Error::validation("codebook", "entries must share one dimension"));
        }
        if self.codebook.entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: "codebook".into() });
        }
        if self.motion_stats.mean.len() != MOTION_DIM || self.motion_stats.std.len() != MOTION_DIM {
            return Err(Error::validation("motion_stats", "expected 16 entries"));
        }
        if self.motion_stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::validation("motion_stats.std", "must be > 0"));
        }
        Ok(())
    }

    /// Learnable parameters in a fixed order: codebook, edge decoder, global decoder.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.codebook.entries.iter().flatten());
        self.decoders.edge.flatten_into(&mut out);
        self.decoders.global.flatten_into(&mut out);
        out
    }

    pub fn unflatten(&mut self, src: &[f64]) {
        let mut k = 0;
        for e in self.codebook.entries.iter_mut().flatten() {
            *e = src[k];
            k += 1;
        }
        k += self.decoders.edge.unflatten_from(&src[k..]);
        self.decoders.global.unflatten_from(&src[k..]);
    }

    pub fn param_count(&self) -> usize {
        self.codebook.classes() * self.codebook.dim()
            + self.decoders.edge.param_count()
            + self.decoders.global.param_count()
    }
}
