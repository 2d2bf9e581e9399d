use thiserror::Error;

/// Errors raised by the field, scan, decoder, loss and metric operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgmError {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("field of size {height}x{width} is smaller than the {min}x{min} kernel")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("backward requires a scalar output, got {0} values")]
    NonScalarOutput(usize),
}

pub type Result<T> = std::result::Result<T, DgmError>;

pub(crate) fn mismatch(expected: impl ToString, actual: impl ToString) -> DgmError {
    DgmError::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
}
