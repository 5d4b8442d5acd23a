use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Slot names or profile families that do not line up.
    #[error("schema error: {0}")]
    Schema(String),

    /// A configuration or scenario that cannot be run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An environment used out of order (for example stepping a finished episode).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed records, logs or checkpoints.
    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite values in optimization.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
