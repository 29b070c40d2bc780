use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PatError {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask: no vessel pixels")]
    EmptyMask,

    #[error("signal has zero power, SNR is undefined")]
    ZeroSignal,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PatError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        PatError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PatError::Io {
            path: path.into(),
            source,
        }
    }
}
