//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IvaError {
    /// Incompatible tensor shapes, reporting both sides.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scalar argument outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was invoked in an invalid state (e.g. missing gradients).
    #[error("state error: {0}")]
    State(String),

    /// Malformed or truncated binary container, with byte offset.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Sequence capacity exceeded.
    #[error("capacity error: sequence length {len} exceeds maximum {max}")]
    Capacity { len: usize, max: usize },

    /// Inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A call-site contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value produced by a graph operation.
    #[error("numeric error in op `{op}`: {message}")]
    Numeric { op: &'static str, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IvaError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        IvaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IvaError>;
