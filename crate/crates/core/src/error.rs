use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("instance too large for exact solver: n = {n}, limit = {limit}")]
    Guard { n: usize, limit: usize },

    #[error("could not parse model response: {reason} (excerpt: {excerpt:?})")]
    Parse { reason: String, excerpt: String },

    #[error("expected {expected} foreground captions, got {got}")]
    SourceCountMismatch { expected: usize, got: usize },

    #[error("caption client failed: {0}")]
    Client(String),

    #[error("ingestion failed for clip {clip_id}: {reason}")]
    Ingestion { clip_id: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input or configuration rather than
    /// by the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_) | Error::Validation(_) | Error::Config(_) | Error::Guard { .. }
        )
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
