//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for all toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Two flat vectors do not share a parameter layout.
    #[error("layout mismatch: {0}")]
    Layout(String),

    /// Index-aligned inputs have inconsistent sizes.
    #[error("size mismatch: {0}")]
    Size(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or out-of-contract input data.
    #[error("invalid input: {0}")]
    Input(String),

    /// Invalid configuration (bad field values, coverage violations).
    #[error("configuration error: {0}")]
    Config(String),

    /// A parse failure tied to a specific line of an input file.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Serialized model does not match the expected parameter shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A metric is undefined for the given input (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
