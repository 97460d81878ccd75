use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported quantizer: {0}")]
    UnsupportedQuantizer(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("schedule state machine: {0}")]
    StateMachine(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 1 configuration, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedQuantizer(_) | Error::Json(_) => 1,
            Error::Divergence { .. } => 3,
            Error::Format { .. } | Error::Consistency(_) | Error::Io { .. } | Error::Csv(_) => 2,
            Error::Dimension(_) | Error::Input(_) | Error::StateMachine(_) | Error::Internal(_) => 2,
        }
    }
}
