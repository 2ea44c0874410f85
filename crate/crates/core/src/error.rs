use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl MpcError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MpcError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MpcError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MpcError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = MpcError> = std::result::Result<T, E>;
