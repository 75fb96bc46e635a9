//! Part-aware spring-mass digital twins.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`] deterministic spring-mass dynamics with ground contact and
//!   kinematic controller points.
//! * [`topology`] part decomposition of per-point features and construction of
//!   the part-aware spring graph.
//! * [`material`] material codebook, material embeddings and part priors.
//! * [`predictor`] geometry/motion features and the two decoders that map
//!   features to simulator parameters.
//! * [`training`] losses, adjoint gradients through rollouts, the
//!   finite-difference oracle and the optimisation loop.
//! * [`corpus`] scene/checkpoint formats, synthetic scenes, metrics and
//!   cross-scene consistency reports.
//! * [`service`] interactive drag sessions over a fitted twin.

pub mod corpus;
pub mod error;
pub mod material;
pub mod pipeline;
pub mod predictor;
pub mod service;
pub mod sim;
pub mod spatial;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
pub use sim::{MassState, PhysParams, SimConfig, SpringGraph, Vec3};
