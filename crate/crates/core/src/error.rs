use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("row {row} is not a probability vector (sum {sum}, min {min})")]
    NotStochastic { row: usize, sum: f64, min: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("optimization diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("policy enumeration needs {needed} candidates, cap is {cap}")]
    EnumerationCap { needed: f64, cap: usize },

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::Shape {
        expected: expected.into(),
        got: got.into(),
    }
}
