use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular or ill-conditioned matrix (pivot magnitude {pivot:e})")]
    Singular { pivot: f64 },

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("isolated node at row {row}: zero degree")]
    IsolatedNode { row: usize },

    #[error("incomplete relation map: {0}")]
    IncompleteRelationMap(String),

    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("relation guidance needs at least two support samples, got {count}")]
    InsufficientPairs { count: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config error at {location}: key `{key}`: {message}")]
    ConfigKey {
        key: String,
        location: String,
        message: String,
    },

    #[error("training diverged: non-finite gradient for `{param}`")]
    TrainingDiverged { param: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
