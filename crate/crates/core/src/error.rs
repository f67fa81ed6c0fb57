use std::path::PathBuf;

use thiserror::Error;

use crate::RequestId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid trace: {0}")]
    Validation(String),

    #[error("profile fit failed: {0}")]
    Fit(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("simulation invariant violated at iteration {iteration}: {message}")]
    Invariant { iteration: u64, message: String },

    #[error("request {request} can never be scheduled: {reason}")]
    NonTerminating { request: RequestId, reason: String },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

pub type Result<T, E = Error> = std::result::Result<T, E>;
