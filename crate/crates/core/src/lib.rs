//! Probabilistic regression with Gaussian processes.
//!
//! Three model families share one toolkit:
//!
//! * [`exact`] — exact GP regression with marginal-likelihood training,
//!   practical up to ~10k points;
//! * [`fitc`] — the FITC sparse approximation: a low-rank-plus-diagonal
//!   model with exact inference at O(n m^2) cost;
//! * [`dgp`] — deep GPs trained with doubly stochastic variational
//!   inference; a one-layer deep GP is the SVGP sparse model.
//!
//! Supporting modules cover dense linear algebra ([`linalg`]), RBF kernels
//! ([`kernels`]), optimization and gradient verification ([`opt`]), tabular
//! preprocessing ([`data`]), metrics and calibration ([`eval`]), and
//! synthetic benchmarks ([`synth`]).

pub mod data;
pub mod dgp;
pub mod error;
pub mod eval;
pub mod exact;
pub mod fitc;
pub mod kernels;
pub mod linalg;
pub mod opt;
pub mod synth;
pub(crate) mod tape;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Gaussian predictive distribution at one test point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrediction {
    pub fn stddev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Whether predictive variances describe the latent function or the noisy
/// observations (latent variance plus the likelihood noise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictSpace {
    Latent,
    Observation,
}
