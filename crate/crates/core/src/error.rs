use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("comparison undefined: {0}")]
    ComparisonUndefined(String),

    #[error("trajectory error: {0}")]
    Trajectory(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Dataset parse failures. Every variant names the file and the 1-based line.
#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{file}:{line}: node id {id} out of range (n = {n})")]
    NodeOutOfRange {
        file: String,
        line: usize,
        id: usize,
        n: usize,
    },
    #[error("{file}:{line}: non-numeric value {token:?}")]
    NonNumeric {
        file: String,
        line: usize,
        token: String,
    },
    #[error("{file}:{line}: label for unknown node {id} (n = {n})")]
    UnknownNode {
        file: String,
        line: usize,
        id: usize,
        n: usize,
    },
    #[error("{file}: mask selects no nodes")]
    EmptyMask { file: String },
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
}
