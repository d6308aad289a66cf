use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}: {what}")]
    Numeric { layer: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("round failed, missing clients {missing:?}")]
    Quorum { missing: Vec<String> },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("degenerate capture: {0}")]
    Objective(String),

    #[error("first-layer recovery failed: {0}")]
    Recovery(String),

    #[error("malformed encoding: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
