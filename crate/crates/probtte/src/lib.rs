//! Probabilistic trip travel-time estimation from learned link
//! representations.
//!
//! Trips over a road network are modeled jointly: a day-level random effect
//! with low-rank covariance `L Lᵀ` correlates trips within a day, and a
//! trip-level effect with low-rank-plus-diagonal covariance `H Hᵀ + D`
//! captures within-trip noise. The factors are learned by maximum likelihood
//! over augmented mini-batches; queries are answered with the exact Gaussian
//! conditional given completed trips.
//!
//! Modules follow the pipeline: [`network`] and [`data`] ingest inputs,
//! [`model`] evaluates likelihoods and gradients, [`training`] fits and
//! evaluates, [`inference`] conditions and predicts, [`metrics`] scores,
//! [`synth`] generates ground-truth corpora for calibration tests.

pub mod data;
pub mod error;
pub mod export;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod network;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
