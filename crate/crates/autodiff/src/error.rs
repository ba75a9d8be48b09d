use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("checkpoint version {found:?} not supported (expected {expected:?})")]
    CheckpointVersion { found: String, expected: String },

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
