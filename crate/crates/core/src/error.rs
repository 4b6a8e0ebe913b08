use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("activation plan does not match model at layer {layer}: {msg}")]
    PlanMismatch { layer: usize, msg: String },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("report has no scores for metric `{0}`")]
    MissingMetric(String),
    #[error("layer {l2} is not deeper than layer {l1}")]
    LayerOrder { l1: String, l2: String },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("item {index} has no reference output; generate references first")]
    MissingReference { index: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed input at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
