//! Gradient-boosted regression trees for estimating the log-intensity of a
//! spatial point process from gridded covariates.
//!
//! The crate covers the full pipeline: covariate and pattern geometry,
//! simulation of Poisson, log-Gaussian Cox and Thomas processes, the
//! K-function based weight field, the penalized tree learner, the boosting
//! trainer with cross-validation, and evaluation metrics plus a scenario
//! benchmark harness.

pub mod bench;
pub mod boosting;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod rng;
pub mod secondorder;
pub mod simulate;
pub mod trainer;

pub use error::{Error, Result};
