use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::sim::Vec3;

fn mean_nn_distance(from: &[Vec3], to: &KdTree) -> f64 {
    from.iter()
        .map(|p| to.nearest_one(p).map_or(0.0, |(_, d2)| d2.sqrt()))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric Chamfer distance with unsquared nearest-neighbour distances:
/// the two directed means are averaged.
pub fn metric_cd(pred: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::invalid("chamfer distance needs non-empty point sets"));
    }
    let a = mean_nn_distance(pred, &KdTree::build(target));
    let b = mean_nn_distance(target, &KdTree::build(pred));
    Ok(0.5 * (a + b))
}

/// Mean Euclidean distance over matched points, `pred[s][t]` vs `target[s][t]`.
pub fn metric_track(pred: &[Vec<Vec3>], target: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims("tracked trajectories", target.len(), pred.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, q) in pred.iter().zip(target) {
        if p.len() != q.len() {
            return Err(Error::dims("tracked frames", q.len(), p.len()));
        }
        for (a, b) in p.iter().zip(q) {
            sum += (a - b).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("tracking error needs at least one correspondence"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub frames: usize,
    /// Meters, mean over frames.
    pub chamfer: f64,
    /// Meters.
    pub track: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene_id: String,
    /// Frames `[0, t_train)`.
    pub resimulation: SplitMetrics,
    /// Frames `[t_train, T)`; absent when the scene has no future frames.
    pub future: Option<SplitMetrics>,
}

fn split_metrics(
    traj: &[Vec<Vec3>],
    clouds: &[Vec<Vec3>],
    indices: &[usize],
    targets: &[Vec<Vec3>],
    frames: std::ops::Range<usize>,
) -> Result<SplitMetrics> {
    let mut cd = 0.0;
    for t in frames.clone() {
        cd += metric_cd(&traj[t], &clouds[t])?;
    }
    let pred: Vec<Vec<Vec3>> = indices
        .iter()
        .map(|&i| frames.clone().map(|t| traj[t][i]).collect())
        .collect();
    let tgt: Vec<Vec<Vec3>> = targets.iter().map(|s| s[frames.clone()].to_vec()).collect();
    Ok(SplitMetrics {
        frames: frames.len(),
        chamfer: cd / frames.len() as f64,
        track: metric_track(&pred, &tgt)?,
    })
}

/// Scores a simulated trajectory `traj[t][i]` against a scene's observations.
pub fn evaluate(scene: &super::Scene, traj: &[Vec<Vec3>]) -> Result<EvalReport> {
    let t_all = scene.frames();
    if traj.len() != t_all {
        return Err(Error::dims("trajectory frames", t_all, traj.len()));
    }
    let n = scene.point_count();
    if let Some(bad) = traj.iter().position(|f| f.len() != n) {
        return Err(Error::dims(format!("trajectory[{bad}] points"), n, traj[bad].len()));
    }
    let clouds = scene.clouds();
    let targets = scene.tracked_targets();
    let idx = &scene.tracked.indices;
    let resimulation = split_metrics(traj, &clouds, idx, &targets, 0..scene.t_train)?;
    let future = if scene.t_train < t_all {
        Some(split_metrics(traj, &clouds, idx, &targets, scene.t_train..t_all)?)
    } else {
        None
    };
    Ok(EvalReport {
        scene_id: scene.meta.id.clone(),
        resimulation,
        future,
    })
}

/// Fitted parameters of one scene, the input to consistency reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub scene_id: String,
    pub category: String,
    pub seed: u64,
    /// Mean of ln(k) over object edges.
    pub mean_log_stiffness: f64,
    /// Mean of ln(k) over each part's intra edges; `None` for parts without any.
    pub part_mean_log_stiffness: Vec<Option<f64>>,
    pub controller_stiffness: f64,
    pub gamma: f64,
    pub delta: f64,
    pub mu: f64,
    pub epsilon: f64,
}

impl FitSummary {
    /// Consistency values: stiffness and dashpot damping in log space.
    fn values(&self) -> [(&'static str, f64); 6] {
        [
            ("log_stiffness", self.mean_log_stiffness),
            ("log_controller_stiffness", self.controller_stiffness.ln()),
            ("log_gamma", self.gamma.ln()),
            ("delta", self.delta),
            ("mu", self.mu),
            ("epsilon", self.epsilon),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// `std / |mean|`; infinite when the mean is zero and the spread is not.
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: String,
    pub scenes: usize,
    pub params: Vec<ParamStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub categories: Vec<CategoryStats>,
    /// Categories with a single scene.
    pub skipped: Vec<String>,
}

pub fn sample_stats(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let cv = if std == 0.0 { 0.0 } else { std / mean.abs() };
    (mean, std, cv)
}

/// Per-category spread of fitted parameters, ordered by category name.
pub fn consistency_report(fits: &[FitSummary]) -> Result<ConsistencyReport> {
    let mut groups: BTreeMap<&str, Vec<&FitSummary>> = BTreeMap::new();
    for f in fits {
        groups.entry(f.category.as_str()).or_default().push(f);
    }
    let mut report = ConsistencyReport {
        categories: Vec::new(),
        skipped: Vec::new(),
    };
    for (cat, members) in groups {
        if members.len() < 2 {
            log::warn!("category `{cat}` has a single scene; skipped");
            report.skipped.push(cat.to_string());
            continue;
        }
        let names = members[0].values().map(|(n, _)| n);
        let params = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let vals: Vec<f64> = members.iter().map(|f| f.values()[k].1).collect();
                let (mean, std, cv) = sample_stats(&vals);
                ParamStats {
                    name: name.to_string(),
                    mean,
                    std,
                    cv,
                }
            })
            .collect();
        report.categories.push(CategoryStats {
            category: cat.to_string(),
            scenes: members.len(),
            params,
        });
    }
    if report.categories.is_empty() {
        return Err(Error::invalid("no category has at least two scenes"));
    }
    Ok(report)
}
