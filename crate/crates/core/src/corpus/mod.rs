//! File formats, synthetic scenes, metrics and consistency reports.
//!
//! Every file is a single JSON document with a `version` field. Numbers are
//! written with shortest round-trip formatting and parsed with full
//! precision, so save/load is bit-exact.

mod metrics;
mod synthetic;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::material::{Codebook, MaterialClassTable, MaterialDistribution};
use crate::predictor::{DecoderWeights, Model, MotionStats, ParamRanges, MOTION_DIM};
use crate::sim::{ControllerTrack, MassState, SimConfig, Vec3};
use crate::topology::TopologyConfig;

pub use metrics::{
    consistency_report, evaluate, metric_cd, metric_track, CategoryStats, ConsistencyReport, EvalReport,
    FitSummary, ParamStats, SplitMetrics,
};
pub use synthetic::{gen_synthetic, ControllerScript, Preset, Sidecar, SyntheticSpec};

pub const FORMAT_VERSION: u32 = 1;

pub type Point = [f64; 3];

pub fn to_vec3(p: &Point) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

pub fn from_vec3(v: &Vec3) -> Point {
    [v.x, v.y, v.z]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub category: String,
    /// Frames per second of the observations.
    pub frame_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_enabled: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub positions: Vec<Point>,
    pub velocities: Vec<Point>,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneControllers {
    /// `positions[c][t]`.
    pub positions: Vec<Vec<Point>>,
    /// Mass points attached to each controller.
    pub n_attach: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracked {
    pub indices: Vec<usize>,
    /// `targets[s][t]` for tracked point `indices[s]`.
    pub targets: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    pub meta: SceneMeta,
    pub num_parts: usize,
    pub cluster_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyConfig>,
    pub initial: SceneState,
    /// Per-point semantic features, `N × d`.
    pub features: Vec<Vec<f64>>,
    /// Passed through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Value>,
    pub controllers: SceneControllers,
    pub tracked: Tracked,
    /// `target_clouds[t]` is the observed point cloud at frame `t`.
    pub target_clouds: Vec<Vec<Point>>,
    /// One distribution per part, or a single object-level distribution.
    pub part_materials: Vec<MaterialDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material_table: Option<MaterialClassTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_feature: Option<Vec<f64>>,
    /// Frames `[0, t_train)` are the training window.
    pub t_train: usize,
}

const SCENE_FIELDS: [&str; 11] = [
    "version",
    "meta",
    "num_parts",
    "cluster_seed",
    "initial",
    "features",
    "controllers",
    "tracked",
    "target_clouds",
    "part_materials",
    "t_train",
];

fn check_finite(path: impl Fn() -> String, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { path: path() })
    }
}

fn check_points(path: &str, points: &[Point]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        check_finite(|| format!("{path}[{i}]"), p)?;
    }
    Ok(())
}

impl Scene {
    /// Number of observed frames.
    pub fn frames(&self) -> usize {
        self.target_clouds.len()
    }

    pub fn point_count(&self) -> usize {
        self.initial.positions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn material_table(&self) -> MaterialClassTable {
        self.material_table.clone().unwrap_or_default()
    }

    pub fn mass_state(&self) -> Result<MassState> {
        MassState::new(
            self.initial.positions.iter().map(to_vec3).collect(),
            self.initial.velocities.iter().map(to_vec3).collect(),
            self.initial.masses.clone(),
        )
    }

    pub fn controller_track(&self) -> Result<ControllerTrack> {
        ControllerTrack::new(
            self.controllers
                .positions
                .iter()
                .map(|c| c.iter().map(to_vec3).collect())
                .collect(),
        )
    }

    pub fn controller_positions_at(&self, frame: usize) -> Vec<Vec3> {
        self.controllers.positions.iter().map(|c| to_vec3(&c[frame])).collect()
    }

    /// `targets[s][t]` as vectors.
    pub fn tracked_targets(&self) -> Vec<Vec<Vec3>> {
        self.tracked
            .targets
            .iter()
            .map(|t| t.iter().map(to_vec3).collect())
            .collect()
    }

    pub fn clouds(&self) -> Vec<Vec<Vec3>> {
        self.target_clouds
            .iter()
            .map(|c| c.iter().map(to_vec3).collect())
            .collect()
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut config = SimConfig {
            dt: 1.0 / self.meta.frame_rate,
            ..SimConfig::default()
        };
        if let Some(s) = self.meta.substeps {
            config.substeps = s;
        }
        if let Some(g) = self.meta.gravity {
            config.gravity = g;
        }
        if let Some(h) = self.meta.ground_height {
            config.ground_height = h;
        }
        if let Some(c) = self.meta.contact_enabled {
            config.contact_enabled = c;
        }
        config
    }

    /// Checks shapes, ranges and finiteness; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::validation("version", format!("unsupported version, expected {FORMAT_VERSION}")));
        }
        let m = &self.meta;
        if m.id.is_empty() {
            return Err(Error::validation("meta.id", "must be non-empty"));
        }
        if !(m.frame_rate.is_finite() && m.frame_rate > 0.0) {
            return Err(Error::validation("meta.frame_rate", "must be finite and > 0"));
        }
        if m.substeps == Some(0) {
            return Err(Error::validation("meta.substeps", "must be >= 1"));
        }
        if let Some(g) = &m.gravity {
            check_finite(|| "meta.gravity".into(), g)?;
        }
        if let Some(h) = m.ground_height {
            check_finite(|| "meta.ground_height".into(), &[h])?;
        }
        if let Some(t) = &self.topology {
            if t.base_knn == 0 || !(t.base_radius_scale > 0.0) || !(t.reference_stiffness > 0.0) {
                return Err(Error::validation("topology", "base_knn, base_radius_scale and reference_stiffness must be > 0"));
            }
        }

        let n = self.point_count();
        if n < 2 {
            return Err(Error::validation("initial.positions", "needs at least two points"));
        }
        check_points("initial.positions", &self.initial.positions)?;
        if self.initial.velocities.len() != n {
            return Err(Error::validation("initial.velocities", format!("expected {n} entries")));
        }
        check_points("initial.velocities", &self.initial.velocities)?;
        if self.initial.masses.len() != n {
            return Err(Error::validation("initial.masses", format!("expected {n} entries")));
        }
        for (i, &mass) in self.initial.masses.iter().enumerate() {
            check_finite(|| format!("initial.masses[{i}]"), &[mass])?;
            if mass <= 0.0 {
                return Err(Error::validation(format!("initial.masses[{i}]"), "mass must be > 0"));
            }
        }

        if self.features.len() != n {
            return Err(Error::validation("features", format!("expected {n} rows")));
        }
        let d = self.feature_dim();
        if d == 0 {
            return Err(Error::validation("features", "feature dimension must be >= 1"));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != d {
                return Err(Error::validation(format!("features[{i}]"), format!("expected {d} entries")));
            }
            check_finite(|| format!("features[{i}]"), f)?;
        }
        if self.num_parts == 0 || self.num_parts > n {
            return Err(Error::validation("num_parts", "must be in [1, point count]"));
        }

        let t = self.frames();
        if t < 2 {
            return Err(Error::validation("target_clouds", "needs at least two frames"));
        }
        for (f, cloud) in self.target_clouds.iter().enumerate() {
            if cloud.is_empty() {
                return Err(Error::validation(format!("target_clouds[{f}]"), "cloud must be non-empty"));
            }
            check_points(&format!("target_clouds[{f}]"), cloud)?;
        }
        if self.t_train < 2 || self.t_train > t {
            return Err(Error::validation("t_train", format!("must satisfy 2 <= t_train <= frames ({t})")));
        }

        let c = &self.controllers;
        if c.positions.is_empty() {
            return Err(Error::validation("controllers.positions", "needs at least one controller"));
        }
        for (k, track) in c.positions.iter().enumerate() {
            if track.len() != t {
                return Err(Error::validation(format!("controllers.positions[{k}]"), format!("expected {t} frames")));
            }
            check_points(&format!("controllers.positions[{k}]"), track)?;
        }
        if c.n_attach == 0 || c.n_attach > n {
            return Err(Error::validation("controllers.n_attach", "must be in [1, point count]"));
        }

        let tr = &self.tracked;
        if tr.indices.is_empty() {
            return Err(Error::validation("tracked.indices", "needs at least one tracked point"));
        }
        if tr.targets.len() != tr.indices.len() {
            return Err(Error::validation("tracked.targets", "needs one trajectory per tracked index"));
        }
        for (s, &i) in tr.indices.iter().enumerate() {
            if i >= n {
                return Err(Error::validation(format!("tracked.indices[{s}]"), "index out of range"));
            }
            if tr.targets[s].len() != t {
                return Err(Error::validation(format!("tracked.targets[{s}]"), format!("expected {t} frames")));
            }
            check_points(&format!("tracked.targets[{s}]"), &tr.targets[s])?;
        }

        let table = self.material_table();
        if self.material_table.is_some() {
            table.validate()?;
        }
        let k = self.part_materials.len();
        if k != self.num_parts && k != 1 {
            return Err(Error::validation("part_materials", "needs one distribution per part or a single object-level one"));
        }
        for (p, dist) in self.part_materials.iter().enumerate() {
            let path = format!("part_materials[{p}]");
            if dist.len() != table.len() {
                return Err(Error::validation(path, format!("expected {} class weights", table.len())));
            }
            check_finite(|| path.clone(), &dist.weights)?;
            dist.validate().map_err(|_| Error::validation(path, "weights must be >= 0 and sum to 1"))?;
        }
        if let Some(z) = &self.motion_feature {
            if z.len() != MOTION_DIM {
                return Err(Error::validation("motion_feature", format!("expected {MOTION_DIM} entries")));
            }
            check_finite(|| "motion_feature".into(), z)?;
        }
        Ok(())
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn require_fields(value: &Value, fields: &[&str]) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::validation("$", "document must be a JSON object"))?;
    for f in fields {
        if !obj.contains_key(*f) {
            return Err(Error::validation(*f, "required field is missing"));
        }
    }
    Ok(())
}

/// Schema errors name the offending field, e.g. `meta.frame_rate`.
fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::validation(field, e.into_inner().to_string())
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec(value).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_document<T: DeserializeOwned>(path: &Path, required: &[&str]) -> Result<T> {
    let value = read_json(path)?;
    require_fields(&value, required)?;
    from_value(value)
}

pub fn scene_from_str(text: &str) -> Result<Scene> {
    let value: Value = serde_json::from_str(text).map_err(|source| Error::Parse {
        path: "<scene>".into(),
        source,
    })?;
    require_fields(&value, &SCENE_FIELDS)?;
    let scene: Scene = from_value(value)?;
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_document(path, &SCENE_FIELDS)?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    scene.validate()?;
    write_json(scene, path)
}

/// Trained predictor state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub codebook: Codebook,
    pub decoders: DecoderWeights,
    pub ranges: ParamRanges,
    pub motion_stats: MotionStats,
    pub use_codebook: bool,
    pub seed: u64,
    /// Scenes were fitted as a single part.
    #[serde(default)]
    pub disable_parts: bool,
}

const CHECKPOINT_FIELDS: [&str; 6] = ["version", "codebook", "decoders", "ranges", "motion_stats", "use_codebook"];

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            codebook: model.codebook.clone(),
            decoders: model.decoders.clone(),
            ranges: model.ranges.clone(),
            motion_stats: model.motion_stats.clone(),
            use_codebook: model.use_codebook,
            seed,
            disable_parts: false,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            codebook: self.codebook.clone(),
            decoders: self.decoders.clone(),
            ranges: self.ranges.clone(),
            motion_stats: self.motion_stats.clone(),
            use_codebook: self.use_codebook,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::validation("version", format!("unsupported version, expected {FORMAT_VERSION}")));
        }
        self.model().validate()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_document(path, &CHECKPOINT_FIELDS)?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    write_json(ckpt, path)
}

/// Simulated positions written by `rollout`, `trajectory[t][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub version: u32,
    pub scene_id: String,
    pub seed: u64,
    pub frame_rate: f64,
    pub inference_seconds: f64,
    pub trajectory: Vec<Vec<Point>>,
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryFile> {
    let traj: TrajectoryFile = read_document(path, &["version", "scene_id", "trajectory"])?;
    if traj.version != FORMAT_VERSION {
        return Err(Error::validation("version", format!("unsupported version, expected {FORMAT_VERSION}")));
    }
    for (t, frame) in traj.trajectory.iter().enumerate() {
        check_points(&format!("trajectory[{t}]"), frame)?;
    }
    Ok(traj)
}
