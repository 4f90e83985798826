use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("gradient check failed at parameter {index}: {reason}")]
    CheckFailure { index: usize, reason: String },

    #[error("failed to ingest {path}: {source}")]
    Ingestion {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model diverged in layer {layer}: {reason}")]
    Divergence { layer: usize, reason: String },

    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("balanced assignment did not converge in round {round}")]
    Solver { round: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors that stem from a bad configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
