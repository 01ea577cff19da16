//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input violated a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A synthetic clip recipe is invalid.
    #[error("recipe error: {0}")]
    Recipe(String),

    /// Training diverged (NaN/Inf loss).
    #[error("divergence: {0}")]
    Divergence(String),

    /// Malformed container or manifest contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
