use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cycle detected through edge on line {line} ({child} -> {parent})")]
    Cycle {
        line: usize,
        child: String,
        parent: String,
    },

    #[error("line {line}: node `{node}` has no path to the root `{root}`")]
    NoRootPath {
        line: usize,
        node: String,
        root: String,
    },

    #[error("line {line}: duplicate edge {child} -> {parent}")]
    DuplicateEdge {
        line: usize,
        child: String,
        parent: String,
    },

    #[error("unknown code `{0}`")]
    UnknownCode(String),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::training::TrainedModel>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    /// True for errors caused by bad inputs rather than internal failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Diverged { .. })
    }
}
