use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("stream session already finalized")]
    Finalized,

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
