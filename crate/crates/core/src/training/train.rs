use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{self, PreparedScene};
use crate::predictor::{Model, MotionStats};

use super::losses::{LossBreakdown, LossWeights};
use super::{rollout_grad, MAX_TRAIN_FRAMES, MAX_TRAIN_POINTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    /// Early stop when the loss improved by less than `min_improvement`
    /// (relative) over the last `patience` epochs.
    pub patience: usize,
    pub min_improvement: f64,
    pub weights: LossWeights,
    /// Evaluate scenes concurrently; results are reduced in scene order.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 10.0,
            patience: 20,
            min_improvement: 1e-5,
            weights: LossWeights::default(),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the scenes that were not skipped.
    pub loss: LossBreakdown,
    pub skipped: usize,
    pub grad_norm: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= c.lr * (*m / b1t) / ((*v / b2t).sqrt() + c.adam_eps);
        }
    }
}

/// Loss and flattened model gradient for one scene.
pub(crate) fn scene_gradient(
    model: &Model,
    scene: &PreparedScene,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (params, cache) = pipeline::predict_with_cache(model, scene)?;
    let (loss, grads) = rollout_grad(&scene.problem, &params, weights)?;
    let flat = pipeline::backprop(model, scene, &cache, &grads);
    Ok((loss, flat))
}

fn thread_pool() -> Option<rayon::ThreadPool> {
    let n: usize = std::env::var("SPRINGTWIN_THREADS").ok()?.parse().ok()?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().ok()
}

/// Fits the codebook and decoders to the scenes by Adam on the rollout loss.
///
/// Motion-feature standardization statistics are refit on `scenes` first.
/// Scenes whose rollout blows up at the current weights are skipped for that
/// epoch; training aborts if every scene is skipped.
pub fn train(mut model: Model, scenes: &[PreparedScene], config: &TrainConfig) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::invalid("training needs at least one scene"));
    }
    config.weights.validate()?;
    if !(config.lr > 0.0 && config.clip_norm > 0.0) {
        return Err(Error::invalid("learning rate and clip norm must be > 0"));
    }
    for s in scenes {
        if s.problem.initial.len() > MAX_TRAIN_POINTS || s.problem.frames > MAX_TRAIN_FRAMES {
            return Err(Error::validation(
                format!("scene `{}`", s.id),
                format!("training is limited to {MAX_TRAIN_POINTS} points and {MAX_TRAIN_FRAMES} frames"),
            ));
        }
    }
    let raw: Vec<_> = scenes.iter().map(|s| s.raw_motion).collect();
    model.motion_stats = MotionStats::fit(&raw);
    model.validate()?;

    let pool = if config.parallel { thread_pool() } else { None };
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len());
    let mut history: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let eval = |s: &PreparedScene| scene_gradient(&model, s, &config.weights);
        let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = if config.parallel {
            match &pool {
                Some(p) => p.install(|| scenes.par_iter().map(eval).collect()),
                None => scenes.par_iter().map(eval).collect(),
            }
        } else {
            scenes.iter().map(eval).collect()
        };

        let mut grad = vec![0.0; params.len()];
        let mut loss = LossBreakdown::default();
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (scene, r) in scenes.iter().zip(results) {
            match r {
                Ok((l, g)) => {
                    used += 1;
                    loss.tracking += l.tracking;
                    loss.chamfer += l.chamfer;
                    loss.prior += l.prior;
                    loss.total += l.total;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Err(e) if e.is_instability() => {
                    log::warn!("epoch {epoch}: scene `{}` skipped: {e}", scene.id);
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::TrainingAborted(format!(
                "every scene was unstable at epoch {epoch}"
            )));
        }
        let inv = 1.0 / used as f64;
        loss.tracking *= inv;
        loss.chamfer *= inv;
        loss.prior *= inv;
        loss.total *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > config.clip_norm {
            let s = config.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam.step(&mut params, &grad, config);
        model.unflatten(&params);
        history.push(EpochRecord {
            epoch,
            loss,
            skipped,
            grad_norm: norm,
            wall_seconds: start.elapsed().as_secs_f64(),
        });

        if history.len() > config.patience {
            let past = history[history.len() - 1 - config.patience].loss.total;
            let now = loss.total;
            if (past - now) / past.abs().max(f64::MIN_POSITIVE) < config.min_improvement {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        stopped_early,
    })
}
