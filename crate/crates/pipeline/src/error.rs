use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] pat_core::PatError),

    #[error(transparent)]
    Nn(#[from] pat_nn::NnError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset problem: {0}")]
    Dataset(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("no checkpoint supplied for learned method '{0}'")]
    MissingCheckpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples {samples})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: String,
    },

    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
