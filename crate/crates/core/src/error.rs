use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in layer `{layer}`")]
    Numeric { layer: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("sensitivity violated: example {index} has norm {norm} > bound {bound}")]
    Sensitivity { index: usize, norm: f64, bound: f64 },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("planner error: {0}")]
    Planner(String),

    #[error("checkpoint format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage `{stage}` diverged at step {step}")]
    Diverged { stage: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
