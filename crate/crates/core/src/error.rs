use std::fmt;

/// Errors produced by calibration, training, data loading and bound evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The scheduling coefficient `b` has a non-positive logarithm argument.
    /// `min_rounds` is the smallest real round count for which it is defined.
    #[error("b-undefined: minimal T = {min_rounds}")]
    BUndefined { min_rounds: f64 },

    /// The K-random convergence bound is undefined at this round count.
    #[error("bound-undefined: minimal T = {min_rounds}")]
    BoundUndefined { min_rounds: f64 },

    /// The contraction factor of a convergence bound is outside (0, 1).
    #[error("regime error: {0}")]
    Regime(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    /// The proximal subproblem objective increased for three consecutive steps.
    #[error("local solver diverged at inner step {step}")]
    Divergence { step: usize },

    /// Divergence surfaced by the orchestrator with its location.
    #[error("local solver diverged in round {round} on client {client} (inner step {step})")]
    RoundDivergence {
        round: usize,
        client: usize,
        step: usize,
    },

    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("insufficient data: need {needed} samples, have {available}")]
    InsufficientData { needed: usize, available: usize },

    /// Every probe point had a vanishing gradient.
    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Failures while parsing IDX files.
#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

pub(crate) fn domain(msg: impl fmt::Display) -> Error {
    Error::Domain(msg.to_string())
}
