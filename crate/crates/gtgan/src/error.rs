use thiserror::Error;

#[derive(Debug, Error)]
pub enum GtganError {
    #[error(transparent)]
    Autodiff(#[from] gtgan_autodiff::Error),

    #[error("graph with {nodes} nodes exceeds exact-GED bound of {max}")]
    GedBound { nodes: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset line {line}: {msg}")]
    DataFormat { line: usize, msg: String },

    #[error("training aborted at step {step}: non-finite {what} (diagnostics at {dump})")]
    NonFiniteLoss {
        step: usize,
        what: String,
        dump: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GtganError>;

/// Converts a pipeline error into an engine error, for closures handed to
/// the finite-difference harness (which speaks the engine's error type).
pub fn to_autodiff(e: GtganError) -> gtgan_autodiff::Error {
    match e {
        GtganError::Autodiff(inner) => inner,
        other => gtgan_autodiff::Error::Config {
            op: "pipeline",
            msg: other.to_string(),
        },
    }
}
