//! Losses, adjoint gradients through rollouts and the optimisation loop.

mod adjoint;
mod losses;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::PartPrior;
use crate::sim::{ControllerTrack, EdgeKind, MassState, PhysParams, SimConfig, SpringGraph, Vec3};

pub use adjoint::{central_difference, evaluate_loss, finite_diff_grad, rollout_grad};
pub use losses::{
    chamfer_loss, gaussian_kl, prior_loss, prior_loss_grad, total_loss, tracking_loss, LossBreakdown, LossWeights,
    MIN_PREDICTED_STD,
};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

/// Training scenes are capped at this many points and frames.
pub const MAX_TRAIN_POINTS: usize = 2000;
pub const MAX_TRAIN_FRAMES: usize = 120;

/// Everything a loss evaluation needs besides the physical parameters.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub initial: MassState,
    pub graph: SpringGraph,
    pub controllers: ControllerTrack,
    pub config: SimConfig,
    pub tracked_indices: Vec<usize>,
    /// `tracked_targets[s][t]`.
    pub tracked_targets: Vec<Vec<Vec3>>,
    /// `clouds[t]`.
    pub clouds: Vec<Vec<Vec3>>,
    /// One prior per part of `graph`.
    pub priors: Vec<PartPrior>,
    /// Loss window `[0, frames)`.
    pub frames: usize,
}

impl FitProblem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.initial.validate()?;
        self.graph.validate()?;
        if self.initial.len() != self.graph.point_count {
            return Err(Error::dims("mass points", self.graph.point_count, self.initial.len()));
        }
        if self.frames == 0 {
            return Err(Error::invalid("loss window must contain at least one frame"));
        }
        if self.priors.len() != self.graph.num_parts {
            return Err(Error::dims("part priors", self.graph.num_parts, self.priors.len()));
        }
        if self.clouds.len() < self.frames {
            return Err(Error::dims("target clouds", self.frames, self.clouds.len()));
        }
        if self.tracked_indices.len() != self.tracked_targets.len() {
            return Err(Error::dims("tracked targets", self.tracked_indices.len(), self.tracked_targets.len()));
        }
        if !self.graph.controller_edges.is_empty() && self.controllers.frames() < self.frames {
            return Err(Error::dims("controller frames", self.frames, self.controllers.frames()));
        }
        Ok(())
    }

    /// Edge indices of each part's intra springs.
    pub fn intra_edges(&self) -> Vec<Vec<usize>> {
        intra_edges(&self.graph)
    }
}

pub fn intra_edges(graph: &SpringGraph) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); graph.num_parts];
    for (e, edge) in graph.edges.iter().enumerate() {
        if let EdgeKind::Intra(p) = edge.kind {
            out[p].push(e);
        }
    }
    out
}

/// Derivatives of a loss with respect to every physical parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGradients {
    pub edge_stiffness: Vec<f64>,
    pub controller_stiffness: f64,
    pub dashpot_damping: f64,
    pub drag_damping: f64,
    pub friction: f64,
    pub elasticity: f64,
}

impl ParamGradients {
    pub fn zeros(edges: usize) -> Self {
        ParamGradients {
            edge_stiffness: vec![0.0; edges],
            controller_stiffness: 0.0,
            dashpot_damping: 0.0,
            drag_damping: 0.0,
            friction: 0.0,
            elasticity: 0.0,
        }
    }

    /// Edge stiffness gradients followed by the five scalars.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.edge_stiffness.clone();
        v.extend([
            self.controller_stiffness,
            self.dashpot_damping,
            self.drag_damping,
            self.friction,
            self.elasticity,
        ]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|g| g.is_finite())
    }
}

/// Parameter vector in the same order as [`ParamGradients::flat`].
pub fn flat_params(p: &PhysParams) -> Vec<f64> {
    let mut v = p.edge_stiffness.clone();
    v.extend([
        p.controller_stiffness,
        p.dashpot_damping,
        p.drag_damping,
        p.friction,
        p.elasticity,
    ]);
    v
}

pub fn params_from_flat(v: &[f64]) -> PhysParams {
    let e = v.len() - 5;
    PhysParams {
        edge_stiffness: v[..e].to_vec(),
        controller_stiffness: v[e],
        dashpot_damping: v[e + 1],
        drag_damping: v[e + 2],
        friction: v[e + 3],
        elasticity: v[e + 4],
    }
}
