use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SpemError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A value-level precondition failed (empty batch, non-scalar loss, ...).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A configuration value is out of its legal range.
    #[error("invalid config: {0}")]
    Config(String),
    /// Mix coefficients collapsed to p0 = p1 = 0; lambda is undefined there.
    #[error("degenerate mix coefficient: p0^2 + p1^2 = 0")]
    DegenerateMix,
    /// Optimizer state is inconsistent with the parameter store.
    #[error("optimizer state: {0}")]
    State(String),
    /// A data file is malformed.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpemError>;

impl SpemError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SpemError::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        SpemError::Argument(msg.into())
    }
}
