//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by construction and query operations.
#[derive(Debug, Error)]
pub enum CarnotError {
    /// A point's coordinate length does not match the owning stratification.
    #[error("coordinate length {got} does not match group dimension {expected}")]
    SpecMismatch { expected: usize, got: usize },

    /// Group multiplication is only implemented for step ≤ 3.
    #[error("unsupported step {0}: multiplication is implemented for step ≤ 3")]
    UnsupportedStep(usize),

    /// A structural invariant of the stratification data failed.
    #[error("invalid stratification: {0}")]
    InvalidStratification(String),

    /// Generic invalid-argument error with context.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires nonempty input received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A net or cube-system invariant failed during construction.
    #[error("cube system invariant violated: {0}")]
    CubeInvariant(String),

    /// Localization requires positive mass on the admissible set.
    #[error("localization rejected: {0}")]
    LocalizationRejected(String),

    /// The curve construction encountered an internal inconsistency.
    #[error("curve construction error: {0}")]
    CurveConstruction(String),

    /// The doubling-measure construction was asked for more depth than exists.
    #[error("insufficient depth: {0}")]
    InsufficientDepth(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CarnotError>;
