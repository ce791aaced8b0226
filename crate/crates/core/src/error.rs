use thiserror::Error;

/// Errors surfaced by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Grid shapes of two operands disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// An input value violates a mathematical precondition (non-finite,
    /// asymmetric, zero-length, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Input data is structurally valid but semantically inconsistent.
    #[error("data error: {0}")]
    Data(String),
    /// A configuration file references something that does not exist.
    #[error("config error: {0}")]
    Config(String),
    /// Optimization produced a non-finite value or failed to make progress.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
