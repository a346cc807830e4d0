//! Error types shared across the crate.

/// Errors produced by tensor operations, model construction, and metrics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are inconsistent with the operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates an invariant (bad stride spec, odd
    /// head dim, invalid model config, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced NaN/Inf or hit a numeric degeneracy.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An API contract was violated (e.g. backward from a non-scalar root).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data failed validation (out-of-range label, mismatched grids).
    #[error("validation error: {0}")]
    Validation(String),

    /// A metric is undefined for the given inputs (e.g. HD95 with an
    /// empty class set). Reported explicitly, never silently zero.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
