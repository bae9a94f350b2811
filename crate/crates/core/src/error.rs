//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by models, preprocessing, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (largest jitter tried: {jitter_tried:e})")]
    NotPositiveDefinite { jitter_tried: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("too many points for an exact GP: n = {n} exceeds cap {cap} (use the override to proceed)")]
    TooManyPoints { n: usize, cap: usize },

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("empty mini-batch")]
    EmptyBatch,

    #[error("invalid architecture: {0}")]
    ArchitectureInvalid(String),

    #[error("non-finite gradient encountered at coordinate {coord}")]
    NonFiniteGradient { coord: usize },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("no rows left after filtering non-finite values")]
    EmptyAfterFiltering,

    #[error("k = {k} too large for PCA: must satisfy 1 <= k <= min(n, d) = {max}")]
    KTooLarge { k: usize, max: usize },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    Empty,

    #[error("predictive variance is zero or negative at index {index}")]
    ZeroVariance { index: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("dataset of {total} points is too large for an exact joint draw (cap {cap})")]
    SizeTooLargeForExactDraw { total: usize, cap: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
