use thiserror::Error;

/// Errors produced by tensor algebra, diagram handling, and the solver.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid tensor diagram: {0}")]
    InvalidDiagram(String),

    #[error("empty observation set")]
    EmptyObservations,

    #[error("mode {0} has no observations")]
    EmptyMode(usize),

    #[error("normalized residual undefined: observed entries have zero norm")]
    ZeroObservedNorm,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
