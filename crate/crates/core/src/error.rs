use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NestError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NestError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("divergence at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDivergence { epoch: usize },

    #[error("stats required: {0}")]
    StatsRequired(String),

    #[error("evaluation integrity violated: {0}")]
    Leakage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{0}")]
    Other(String),
}

impl NestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NestError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        NestError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
