//! From a scene file to a simulatable spring graph and predicted parameters.
//!
//! `prepare` clusters the features into parts, derives part priors, builds
//! the part-aware topology, attaches controllers and precomputes every
//! feature that does not depend on learnable weights. `predict_with_cache`
//! runs the decoders and `backprop` chains parameter gradients back to the
//! flattened model.

use ndarray::{Array2, Axis};

use crate::corpus::{FitSummary, Scene};
use crate::error::{Error, Result};
use crate::material::{
    embed_material, part_prior, Interval, MaterialDistribution, PartPrior, SpringParts,
};
use crate::predictor::{
    edge_geometry_features, log_squash, motion_descriptor, squash_globals, GlobalRanges, MlpCache, Model,
    MotionFeature, ParamRanges, GEO_DIM, GLOBAL_OUTPUTS, MOTION_DIM,
};
use crate::sim::{attach_controllers, rollout, ControllerTrack, EdgeKind, PhysParams, Rollout, SpringGraph};
use crate::topology::{
    build_graph, cluster_parts, median_nn_distance, topology_hyperparams, PartDecomposition, PartTopology,
    TopologyConfig,
};
use crate::training::{intra_edges, FitProblem, ParamGradients};

/// Stiffness windows span this many prior standard deviations either side.
pub const PRIOR_WINDOW_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepareOptions {
    /// Treat the object as one part with a size-weighted mixed material.
    pub disable_parts: bool,
    pub dt: Option<f64>,
    pub substeps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub category: String,
    pub problem: FitProblem,
    pub decomposition: PartDecomposition,
    pub part_materials: Vec<MaterialDistribution>,
    pub priors: Vec<PartPrior>,
    /// Edge geometry features, one row per object edge.
    pub geometry: Array2<f64>,
    /// Motion descriptor before standardization.
    pub raw_motion: MotionFeature,
    pub edge_ranges: Vec<Interval>,
    pub global_ranges: GlobalRanges,
    /// Frames of the scene, including the future window.
    pub total_frames: usize,
}

/// Clusters and part materials per the scene, honouring `disable_parts`.
fn decompose(scene: &Scene, disable_parts: bool) -> Result<(PartDecomposition, Vec<MaterialDistribution>)> {
    let n = scene.point_count();
    let clustered = if scene.num_parts > 1 {
        cluster_parts(&scene.features, scene.num_parts, scene.cluster_seed)?
    } else {
        PartDecomposition::single(n)
    };
    let dists: Vec<MaterialDistribution> = if scene.part_materials.len() == 1 {
        vec![scene.part_materials[0].clone(); clustered.num_parts]
    } else {
        scene.part_materials.clone()
    };
    if disable_parts {
        let mixed = MaterialDistribution::mix(&dists, &clustered.part_sizes)?;
        Ok((PartDecomposition::single(n), vec![mixed]))
    } else {
        Ok((clustered, dists))
    }
}

pub fn prepare(scene: &Scene, ranges: &ParamRanges, opts: &PrepareOptions) -> Result<PreparedScene> {
    scene.validate()?;
    ranges.validate()?;
    let mut config = scene.sim_config();
    if let Some(dt) = opts.dt {
        config.dt = dt;
    }
    if let Some(s) = opts.substeps {
        config.substeps = s;
    }
    config.validate()?;

    let table = scene.material_table();
    let (decomposition, part_materials) = decompose(scene, opts.disable_parts)?;
    let priors = part_materials
        .iter()
        .map(|m| part_prior(m, &table))
        .collect::<Result<Vec<_>>>()?;

    let initial = scene.mass_state()?;
    let positions = &initial.positions;
    let topo_config = scene.topology.clone().unwrap_or_default();
    let graph = build_topology(positions, &decomposition, &priors, &topo_config)?;
    let mut graph = graph;
    let ctrl0 = scene.controller_positions_at(0);
    graph.controller_edges = attach_controllers(&initial, &ctrl0, scene.controllers.n_attach)?;
    graph.controller_count = ctrl0.len();
    graph.validate()?;

    let feats = edge_geometry_features(&graph, positions)?;
    let mut geometry = Array2::zeros((feats.len(), GEO_DIM));
    for (mut row, f) in geometry.axis_iter_mut(Axis(0)).zip(&feats) {
        row.assign(&ndarray::ArrayView1::from(&f[..]));
    }

    let controllers = scene.controller_track()?;
    let tracked_targets = scene.tracked_targets();
    let raw_motion: MotionFeature = match &scene.motion_feature {
        Some(z) => z.as_slice().try_into().map_err(|_| Error::dims("motion_feature", MOTION_DIM, z.len()))?,
        None => {
            let window: Vec<_> = tracked_targets.iter().map(|t| t[..scene.t_train].to_vec()).collect();
            motion_descriptor(&controllers.truncated(scene.t_train), &window, config.dt)?
        }
    };

    let edge_ranges = edge_stiffness_ranges(&graph, &priors, &ranges.stiffness);
    let global_ranges = global_ranges(ranges, &priors, &decomposition.part_sizes);

    let problem = FitProblem {
        initial,
        graph,
        controllers,
        config,
        tracked_indices: scene.tracked.indices.clone(),
        tracked_targets,
        clouds: scene.clouds(),
        priors: priors.clone(),
        frames: scene.t_train,
    };
    problem.validate()?;
    Ok(PreparedScene {
        id: scene.meta.id.clone(),
        category: scene.meta.category.clone(),
        problem,
        decomposition,
        part_materials,
        priors,
        geometry,
        raw_motion,
        edge_ranges,
        global_ranges,
        total_frames: scene.frames(),
    })
}

/// Per-part topology hyperparameters from priors, then the spring graph.
pub fn build_topology(
    positions: &[crate::sim::Vec3],
    decomposition: &PartDecomposition,
    priors: &[PartPrior],
    config: &TopologyConfig,
) -> Result<SpringGraph> {
    let global_nn = median_nn_distance(positions).unwrap_or(crate::sim::MIN_REST_LENGTH);
    let topo = (0..decomposition.num_parts)
        .map(|p| {
            let pts: Vec<_> = decomposition.members(p).iter().map(|&i| positions[i]).collect();
            topology_hyperparams(&priors[p], &pts, global_nn, config)
        })
        .collect::<Result<Vec<PartTopology>>>()?;
    build_graph(positions, decomposition, &topo, config.boundary_pairs)
}

/// Global stiffness range narrowed to each edge's prior window.
pub fn edge_stiffness_ranges(graph: &SpringGraph, priors: &[PartPrior], global: &Interval) -> Vec<Interval> {
    let windows: Vec<Interval> = priors.iter().map(|p| p.stiffness_window(PRIOR_WINDOW_SIGMAS)).collect();
    graph
        .edges
        .iter()
        .map(|e| {
            let window = match e.kind {
                EdgeKind::Intra(p) => windows[p],
                EdgeKind::Boundary => windows[graph.part_of[e.i]].hull(&windows[graph.part_of[e.j]]),
            };
            window.intersect(global).unwrap_or(*global)
        })
        .collect()
}

/// Global decoder ranges narrowed by the size-weighted object prior.
pub fn global_ranges(ranges: &ParamRanges, priors: &[PartPrior], sizes: &[usize]) -> GlobalRanges {
    let [damping, drag, friction, elasticity] = PartPrior::object_ranges(priors, sizes);
    let narrow = |prior: Interval, global: Interval| prior.intersect(&global).unwrap_or(global);
    GlobalRanges {
        damping: narrow(damping, ranges.damping),
        drag: narrow(drag, ranges.drag),
        friction: narrow(friction, ranges.friction),
        elasticity: narrow(elasticity, ranges.elasticity),
        controller_stiffness: ranges.controller_stiffness,
    }
}

/// Forward-pass intermediates needed by [`backprop`].
#[derive(Debug, Clone)]
pub struct PredictionCache {
    edge: MlpCache,
    global: MlpCache,
    /// d k_e / d y_e.
    edge_slope: Vec<f64>,
    global_slope: [f64; GLOBAL_OUTPUTS],
}

fn part_features(model: &Model, scene: &PreparedScene) -> Result<Vec<Vec<f64>>> {
    scene
        .part_materials
        .iter()
        .map(|m| {
            if model.use_codebook {
                embed_material(m, &model.codebook)
            } else {
                Ok(m.weights.clone())
            }
        })
        .collect()
}

fn edge_parts(scene: &PreparedScene) -> impl Iterator<Item = SpringParts> + '_ {
    let g = &scene.problem.graph;
    g.edges.iter().map(move |e| SpringParts::of(e, &g.part_of))
}

/// Decoder inputs: standardized motion feature, material feature, geometry.
fn decoder_inputs(model: &Model, scene: &PreparedScene) -> Result<(Array2<f64>, Array2<f64>)> {
    let z_vid = model.motion_stats.standardize(&scene.raw_motion);
    let parts = part_features(model, scene)?;
    let md = model.material_dim();
    if parts.iter().any(|p| p.len() != md) {
        return Err(Error::dims("material feature", md, parts[0].len()));
    }
    let e = scene.geometry.nrows();
    let mut edge_in = Array2::zeros((e, MOTION_DIM + md + GEO_DIM));
    for (r, sp) in edge_parts(scene).enumerate() {
        let mut row = edge_in.row_mut(r);
        for (k, v) in z_vid.iter().enumerate() {
            row[k] = *v;
        }
        match sp {
            SpringParts::Intra(p) => {
                for k in 0..md {
                    row[MOTION_DIM + k] = parts[p][k];
                }
            }
            SpringParts::Boundary(a, b) => {
                for k in 0..md {
                    row[MOTION_DIM + k] = 0.5 * (parts[a][k] + parts[b][k]);
                }
            }
            SpringParts::Controller => unreachable!("object edges only"),
        }
        for k in 0..GEO_DIM {
            row[MOTION_DIM + md + k] = scene.geometry[[r, k]];
        }
    }
    let sizes = &scene.decomposition.part_sizes;
    let total: usize = sizes.iter().sum();
    let mut global_in = Array2::zeros((1, MOTION_DIM + md));
    for (k, v) in z_vid.iter().enumerate() {
        global_in[[0, k]] = *v;
    }
    for (p, z) in parts.iter().enumerate() {
        let w = sizes[p] as f64 / total as f64;
        for k in 0..md {
            global_in[[0, MOTION_DIM + k]] += w * z[k];
        }
    }
    Ok((edge_in, global_in))
}

pub fn predict_with_cache(model: &Model, scene: &PreparedScene) -> Result<(PhysParams, PredictionCache)> {
    let (edge_in, global_in) = decoder_inputs(model, scene)?;
    let (y, edge_cache) = model.decoders.edge.forward(&edge_in)?;
    let (g, global_cache) = model.decoders.global.forward(&global_in)?;
    let mut stiffness = Vec::with_capacity(y.nrows());
    let mut edge_slope = Vec::with_capacity(y.nrows());
    for (e, range) in scene.edge_ranges.iter().enumerate() {
        let (k, dk) = log_squash(y[[e, 0]], range);
        stiffness.push(k);
        edge_slope.push(dk);
    }
    let raw: Vec<f64> = g.row(0).to_vec();
    let (globals, global_slope) = squash_globals(&raw, &scene.global_ranges);
    let params = PhysParams {
        edge_stiffness: stiffness,
        controller_stiffness: globals.controller_stiffness,
        dashpot_damping: globals.dashpot_damping,
        drag_damping: globals.drag_damping,
        friction: globals.friction,
        elasticity: globals.elasticity,
    };
    Ok((
        params,
        PredictionCache {
            edge: edge_cache,
            global: global_cache,
            edge_slope,
            global_slope,
        },
    ))
}

/// Feed-forward parameter prediction.
pub fn predict(model: &Model, scene: &PreparedScene) -> Result<PhysParams> {
    Ok(predict_with_cache(model, scene)?.0)
}

/// Chains physical-parameter gradients through the squashes, decoders and
/// codebook. The result is laid out like [`Model::flatten`].
pub fn backprop(model: &Model, scene: &PreparedScene, cache: &PredictionCache, grads: &ParamGradients) -> Vec<f64> {
    let e = grads.edge_stiffness.len();
    let dy = Array2::from_shape_fn((e, 1), |(r, _)| grads.edge_stiffness[r] * cache.edge_slope[r]);
    let (edge_grad, edge_dx) = model.decoders.edge.backward(&cache.edge, &dy);
    let raw = [
        grads.dashpot_damping,
        grads.drag_damping,
        grads.friction,
        grads.elasticity,
        grads.controller_stiffness,
    ];
    let dg = Array2::from_shape_fn((1, GLOBAL_OUTPUTS), |(_, c)| raw[c] * cache.global_slope[c]);
    let (global_grad, global_dx) = model.decoders.global.backward(&cache.global, &dg);

    let classes = model.codebook.classes();
    let dim = model.codebook.dim();
    let mut codebook_grad = vec![0.0; classes * dim];
    if model.use_codebook {
        let k = scene.part_materials.len();
        let mut part_grad = vec![vec![0.0; dim]; k];
        for (r, sp) in edge_parts(scene).enumerate() {
            let row = edge_dx.row(r);
            match sp {
                SpringParts::Intra(p) => {
                    for c in 0..dim {
                        part_grad[p][c] += row[MOTION_DIM + c];
                    }
                }
                SpringParts::Boundary(a, b) => {
                    for c in 0..dim {
                        part_grad[a][c] += 0.5 * row[MOTION_DIM + c];
                        part_grad[b][c] += 0.5 * row[MOTION_DIM + c];
                    }
                }
                SpringParts::Controller => {}
            }
        }
        let sizes = &scene.decomposition.part_sizes;
        let total: usize = sizes.iter().sum();
        for (p, pg) in part_grad.iter_mut().enumerate() {
            let w = sizes[p] as f64 / total as f64;
            for c in 0..dim {
                pg[c] += w * global_dx[[0, MOTION_DIM + c]];
            }
        }
        for (p, dist) in scene.part_materials.iter().enumerate() {
            for (q, &wq) in dist.weights.iter().enumerate() {
                for c in 0..dim {
                    codebook_grad[q * dim + c] += wq * part_grad[p][c];
                }
            }
        }
    }
    let mut out = codebook_grad;
    edge_grad.flatten_into(&mut out);
    global_grad.flatten_into(&mut out);
    out
}

/// Fitted-parameter summary for consistency reports.
pub fn summarize(scene: &PreparedScene, params: &PhysParams, seed: u64) -> FitSummary {
    let logs: Vec<f64> = params.edge_stiffness.iter().map(|k| k.ln()).collect();
    let mean = |idx: &mut dyn Iterator<Item = f64>| {
        let (s, n) = idx.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let parts = intra_edges(&scene.problem.graph)
        .iter()
        .map(|g| mean(&mut g.iter().map(|&e| logs[e])))
        .collect();
    FitSummary {
        scene_id: scene.id.clone(),
        category: scene.category.clone(),
        seed,
        mean_log_stiffness: mean(&mut logs.iter().copied()).unwrap_or(0.0),
        part_mean_log_stiffness: parts,
        controller_stiffness: params.controller_stiffness,
        gamma: params.dashpot_damping,
        delta: params.drag_damping,
        mu: params.friction,
        epsilon: params.elasticity,
    }
}

/// Feed-forward prediction followed by a rollout of `frames` frames.
///
/// Past the last recorded controller frame, controllers hold their final
/// position.
pub fn feed_forward(model: &Model, scene: &PreparedScene, frames: usize) -> Result<(PhysParams, Rollout)> {
    let params = predict(model, scene)?;
    let p = &scene.problem;
    let track = ControllerTrack {
        positions: p
            .controllers
            .positions
            .iter()
            .map(|traj| {
                let mut t = traj.clone();
                if let Some(&last) = traj.last() {
                    t.resize(frames.max(traj.len()), last);
                }
                t
            })
            .collect(),
    };
    let out = rollout(&p.initial, &p.graph, &params, &track, frames, &p.config)?;
    Ok((params, out))
}
