//! Synthetic scenes with known ground-truth parameters.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{from_vec3, Point, Scene, SceneControllers, SceneMeta, SceneState, Tracked, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::material::{MaterialClassTable, MaterialDistribution};
use crate::pipeline::{prepare, PrepareOptions};
use crate::predictor::ParamRanges;
use crate::sim::{rollout, EdgeKind, PhysParams, Vec3};
use crate::topology::{cluster_parts, TopologyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    RopeChain,
    ClothGrid,
    TwoMaterialBlock,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::RopeChain => "rope-chain",
            Preset::ClothGrid => "cloth-grid",
            Preset::TwoMaterialBlock => "two-material-block",
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Preset::RopeChain => "rope",
            Preset::ClothGrid => "cloth",
            Preset::TwoMaterialBlock => "block",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerScript {
    /// Constant upward velocity.
    Lift,
    /// Constant horizontal (+y) velocity.
    Push,
    /// Smooth vertical up-and-down motion.
    Oscillate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub preset: Preset,
    #[serde(default)]
    pub id: Option<String>,
    /// Rope point count or cloth grid side; ignored by the block.
    #[serde(default)]
    pub resolution: Option<usize>,
    pub frames: usize,
    /// Ground-truth stiffness per material part, N/m.
    pub part_stiffness: Vec<f64>,
    pub controller_stiffness: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub script: ControllerScript,
    /// Controller speed for lift/push, peak height for oscillate.
    pub speed: f64,
    /// Std of the Gaussian noise added to every observation, meters.
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub substeps: Option<usize>,
}

impl SyntheticSpec {
    /// Default parameters for a preset.
    pub fn preset(preset: Preset) -> Self {
        let base = SyntheticSpec {
            preset,
            id: None,
            resolution: None,
            frames: 60,
            part_stiffness: vec![800.0],
            controller_stiffness: 2000.0,
            gamma: 2.0,
            delta: 0.98,
            mu: 0.5,
            epsilon: 0.2,
            script: ControllerScript::Lift,
            speed: 0.5,
            noise_std: 1e-3,
            seed: 0,
            substeps: None,
        };
        match preset {
            Preset::RopeChain => base,
            Preset::ClothGrid => SyntheticSpec {
                part_stiffness: vec![300.0],
                gamma: 0.1,
                speed: 0.4,
                ..base
            },
            Preset::TwoMaterialBlock => SyntheticSpec {
                part_stiffness: vec![50.0, 5000.0],
                controller_stiffness: 5000.0,
                gamma: 0.2,
                mu: 0.6,
                speed: 0.3,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::validation("frames", "must be >= 2"));
        }
        let parts = match self.preset {
            Preset::TwoMaterialBlock => 2,
            _ => 1,
        };
        if self.part_stiffness.len() != parts {
            return Err(Error::validation("part_stiffness", format!("expected {parts} entries")));
        }
        if let Some(r) = self.resolution {
            if r < 3 {
                return Err(Error::validation("resolution", "must be >= 3"));
            }
        }
        if self.substeps == Some(0) {
            return Err(Error::validation("substeps", "must be >= 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::validation("noise_std", "must be finite and >= 0"));
        }
        if !(self.speed.is_finite()) {
            return Err(Error::validation("speed", "must be finite"));
        }
        let mut gt = PhysParams {
            edge_stiffness: self.part_stiffness.clone(),
            controller_stiffness: self.controller_stiffness,
            dashpot_damping: self.gamma,
            drag_damping: self.delta,
            friction: self.mu,
            elasticity: self.epsilon,
        };
        gt.validate(parts).map_err(|e| match e {
            Error::Validation { path, rule } => Error::validation(format!("ground truth {path}"), rule),
            other => other,
        })?;
        gt.edge_stiffness.clear();
        Ok(())
    }
}

/// Ground truth written next to a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    /// Stiffness level of each clustered part, in scene part order.
    pub part_stiffness: Vec<f64>,
    pub edge_stiffness: Vec<f64>,
    pub controller_stiffness: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
    pub epsilon: f64,
}

struct Geometry {
    positions: Vec<Vec3>,
    /// Ground-truth material part of each point.
    labels: Vec<usize>,
    materials: Vec<MaterialDistribution>,
    anchors: Vec<Vec3>,
    n_attach: usize,
    substeps: usize,
    tracked_stride: usize,
    topology: Option<TopologyConfig>,
}

/// Masses are 1/N, so h^2 k/m grows with N; substeps grow with sqrt(N) to keep it.
fn scaled_substeps(base: usize, n: usize, n_default: usize) -> usize {
    if n <= n_default {
        return base;
    }
    (base as f64 * (n as f64 / n_default as f64).sqrt()).ceil() as usize
}

fn geometry(spec: &SyntheticSpec, table: &MaterialClassTable) -> Result<Geometry> {
    Ok(match spec.preset {
        Preset::RopeChain => {
            let n = spec.resolution.unwrap_or(60);
            let positions: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64 / (n - 1) as f64, 0.0, 0.0)).collect();
            Geometry {
                anchors: vec![positions[0]],
                labels: vec![0; n],
                materials: vec![table.distribution(&[("rope", 0.7), ("cloth", 0.2), ("plush", 0.1)])?],
                positions,
                n_attach: 3,
                substeps: scaled_substeps(20, n, 60),
                tracked_stride: 3,
                topology: None,
            }
        }
        Preset::ClothGrid => {
            let side = spec.resolution.unwrap_or(20);
            let h = 0.05;
            let positions: Vec<Vec3> = (0..side * side)
                .map(|k| Vec3::new((k % side) as f64 * h, (k / side) as f64 * h, 0.0))
                .collect();
            Geometry {
                anchors: vec![positions[0], positions[side - 1]],
                labels: vec![0; side * side],
                materials: vec![table.distribution(&[("cloth", 0.7), ("paper", 0.2), ("leather", 0.1)])?],
                positions,
                n_attach: 4,
                substeps: scaled_substeps(40, side * side, 400),
                tracked_stride: 10,
                topology: None,
            }
        }
        Preset::TwoMaterialBlock => {
            let h = 0.05;
            let (nx, ny, nz) = (6usize, 6usize, 4usize);
            let mut positions = Vec::with_capacity(2 * nx * ny * nz);
            let mut labels = Vec::with_capacity(positions.capacity());
            for part in 0..2 {
                let x0 = part as f64 * nx as f64 * h;
                for k in 0..nz {
                    for j in 0..ny {
                        for i in 0..nx {
                            positions.push(Vec3::new(x0 + i as f64 * h, j as f64 * h, k as f64 * h));
                            labels.push(part);
                        }
                    }
                }
            }
            let top = (nz - 1) as f64 * h;
            let mid_y = (ny - 1) as f64 * h / 2.0;
            let x_max = (2 * nx - 1) as f64 * h;
            Geometry {
                anchors: vec![Vec3::new(0.0, mid_y, top), Vec3::new(x_max, mid_y, top)],
                positions,
                labels,
                materials: vec![
                    table.distribution(&[("foam", 0.6), ("sponge", 0.2), ("plush", 0.2)])?,
                    table.distribution(&[("rubber", 0.6), ("plastic", 0.3), ("leather", 0.1)])?,
                ],
                n_attach: 6,
                substeps: 120,
                tracked_stride: 6,
                topology: Some(TopologyConfig {
                    base_knn: 14,
                    ..TopologyConfig::default()
                }),
            }
        }
    })
}

fn script_offset(script: ControllerScript, speed: f64, time: f64) -> Vec3 {
    match script {
        ControllerScript::Lift => Vec3::new(0.0, 0.0, speed * time),
        ControllerScript::Push => Vec3::new(0.0, speed * time, 0.0),
        ControllerScript::Oscillate => {
            let phase = 2.0 * std::f64::consts::PI * time;
            Vec3::new(0.0, 0.0, 0.5 * speed * (1.0 - phase.cos()))
        }
    }
}

/// Builds the preset, simulates it with the ground-truth parameters and
/// returns the noisy observations as a scene plus the ground truth.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Scene, Sidecar)> {
    spec.validate()?;
    let table = MaterialClassTable::default();
    let geo = geometry(spec, &table)?;
    let n = geo.positions.len();
    let k = geo.materials.len();
    let frames = spec.frames;
    let frame_rate = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let feature_noise = Normal::new(0.0, 0.05).expect("valid std");

    let features: Vec<Vec<f64>> = geo
        .labels
        .iter()
        .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 } + feature_noise.sample(&mut rng)).collect())
        .collect();

    // Parts are whatever clustering recovers; each cluster takes the material
    // and stiffness level of its majority ground-truth label.
    let clusters = cluster_parts(&features, k, spec.seed)?;
    let majority: Vec<usize> = (0..clusters.num_parts)
        .map(|c| {
            let mut counts = vec![0usize; k];
            for (i, &a) in clusters.assignments.iter().enumerate() {
                if a == c {
                    counts[geo.labels[i]] += 1;
                }
            }
            (0..k).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0)
        })
        .collect();

    let controllers: Vec<Vec<Point>> = geo
        .anchors
        .iter()
        .map(|a| {
            (0..frames)
                .map(|t| from_vec3(&(a + script_offset(spec.script, spec.speed, t as f64 / frame_rate))))
                .collect()
        })
        .collect();
    let rest: Vec<Point> = geo.positions.iter().map(from_vec3).collect();
    let tracked_indices: Vec<usize> = (0..n).step_by(geo.tracked_stride).collect();
    let t_train = ((frames as f64) * 0.7).round().clamp(2.0, frames as f64) as usize;
    let mut scene = Scene {
        version: FORMAT_VERSION,
        meta: SceneMeta {
            id: spec
                .id
                .clone()
                .unwrap_or_else(|| format!("{}-{}-{}", spec.preset.name(), script_name(spec.script), spec.seed)),
            category: spec.preset.category().into(),
            frame_rate,
            substeps: Some(spec.substeps.unwrap_or(geo.substeps)),
            gravity: None,
            ground_height: None,
            contact_enabled: None,
        },
        num_parts: k,
        cluster_seed: spec.seed,
        topology: geo.topology.clone(),
        initial: SceneState {
            positions: rest.clone(),
            velocities: vec![[0.0; 3]; n],
            masses: vec![1.0 / n as f64; n],
        },
        features,
        appearance: None,
        controllers: SceneControllers {
            positions: controllers,
            n_attach: geo.n_attach,
        },
        tracked: Tracked {
            targets: vec![vec![[0.0; 3]; frames]; tracked_indices.len()],
            indices: tracked_indices,
        },
        target_clouds: vec![rest; frames],
        part_materials: majority.iter().map(|&l| geo.materials[l].clone()).collect(),
        material_table: None,
        motion_feature: None,
        t_train,
    };

    let prepared = prepare(&scene, &ParamRanges::default(), &PrepareOptions::default())?;
    let part_stiffness: Vec<f64> = majority.iter().map(|&l| spec.part_stiffness[l]).collect();
    let graph = &prepared.problem.graph;
    let edge_stiffness = graph
        .edges
        .iter()
        .map(|e| match e.kind {
            EdgeKind::Intra(p) => part_stiffness[p],
            EdgeKind::Boundary => (part_stiffness[graph.part_of[e.i]] * part_stiffness[graph.part_of[e.j]]).sqrt(),
        })
        .collect();
    let gt = PhysParams {
        edge_stiffness,
        controller_stiffness: spec.controller_stiffness,
        dashpot_damping: spec.gamma,
        drag_damping: spec.delta,
        friction: spec.mu,
        elasticity: spec.epsilon,
    };
    let sim = rollout(
        &prepared.problem.initial,
        graph,
        &gt,
        &prepared.problem.controllers,
        frames,
        &prepared.problem.config,
    )
    .map_err(|e| {
        if e.is_instability() {
            log::error!("ground-truth rollout is unstable; use more substeps or softer ground-truth stiffness");
        }
        e
    })?;

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut noisy = |p: &Vec3| -> Point {
        if spec.noise_std == 0.0 {
            from_vec3(p)
        } else {
            [
                p.x + noise.sample(&mut rng),
                p.y + noise.sample(&mut rng),
                p.z + noise.sample(&mut rng),
            ]
        }
    };
    scene.target_clouds = sim.trajectory.iter().map(|f| f.iter().map(&mut noisy).collect()).collect();
    scene.tracked.targets = scene
        .tracked
        .indices
        .iter()
        .map(|&i| sim.trajectory.iter().map(|f| noisy(&f[i])).collect())
        .collect();
    scene.validate()?;

    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        preset: spec.preset,
        seed: spec.seed,
        part_stiffness,
        edge_stiffness: gt.edge_stiffness,
        controller_stiffness: gt.controller_stiffness,
        gamma: gt.dashpot_damping,
        delta: gt.drag_damping,
        mu: gt.friction,
        epsilon: gt.elasticity,
    };
    Ok((scene, sidecar))
}

fn script_name(s: ControllerScript) -> &'static str {
    match s {
        ControllerScript::Lift => "lift",
        ControllerScript::Push => "push",
        ControllerScript::Oscillate => "oscillate",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rope() -> SyntheticSpec {
        SyntheticSpec {
            resolution: Some(12),
            frames: 10,
            ..SyntheticSpec::preset(Preset::RopeChain)
        }
    }

    #[test]
    fn noiseless_clouds_equal_rollout() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..small_rope()
        };
        let (scene, gt) = gen_synthetic(&spec).unwrap();
        let prepared = prepare(&scene, &ParamRanges::default(), &PrepareOptions::default()).unwrap();
        let params = PhysParams {
            edge_stiffness: gt.edge_stiffness.clone(),
            controller_stiffness: gt.controller_stiffness,
            dashpot_damping: gt.gamma,
            drag_damping: gt.delta,
            friction: gt.mu,
            elasticity: gt.epsilon,
        };
        let p = &prepared.problem;
        let sim = rollout(&p.initial, &p.graph, &params, &p.controllers, scene.frames(), &p.config).unwrap();
        for (t, frame) in sim.trajectory.iter().enumerate() {
            let cloud: Vec<Point> = frame.iter().map(from_vec3).collect();
            assert_eq!(cloud, scene.target_clouds[t]);
        }
        assert_eq!(scene.t_train, 7);
    }

    #[test]
    fn same_seed_same_scene() {
        let (a, sa) = gen_synthetic(&small_rope()).unwrap();
        let (b, sb) = gen_synthetic(&small_rope()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(sa, sb);
        let (c, _) = gen_synthetic(&SyntheticSpec { seed: 1, ..small_rope() }).unwrap();
        assert_ne!(a.target_clouds, c.target_clouds);
    }

    #[test]
    fn block_sidecar_records_part_ordering() {
        let spec = SyntheticSpec {
            frames: 3,
            ..SyntheticSpec::preset(Preset::TwoMaterialBlock)
        };
        let (scene, gt) = gen_synthetic(&spec).unwrap();
        assert_eq!(scene.num_parts, 2);
        let mut levels = gt.part_stiffness.clone();
        levels.sort_by(f64::total_cmp);
        assert_eq!(levels, vec![50.0, 5000.0]);
        let table = MaterialClassTable::default();
        let foam = table.index_of("foam").unwrap();
        for (p, m) in scene.part_materials.iter().enumerate() {
            let soft = m.weights[foam] > 0.0;
            assert_eq!(soft, gt.part_stiffness[p] == 50.0);
        }
    }

    #[test]
    fn invalid_ground_truth_is_rejected() {
        let spec = SyntheticSpec {
            delta: 1.5,
            ..small_rope()
        };
        assert!(matches!(gen_synthetic(&spec), Err(Error::Validation { .. })));
    }
}
