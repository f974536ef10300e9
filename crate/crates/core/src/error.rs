use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the model, the data pipeline and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky failed even after escalating the diagonal jitter.
    #[error("numerical failure in {context}: attempted jitter levels {jitters:?}")]
    NumericalFailure { context: String, jitters: Vec<f64> },

    #[error("invalid state: {0}")]
    State(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A numerical failure raised while optimising or fitting one particular leaf.
    #[error("leaf {leaf}: {source}")]
    Leaf {
        leaf: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Short machine-readable category, used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::State(_) => "state",
            Error::Capacity(_) => "capacity",
            Error::Leaf { source, .. } => source.category(),
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Format(_) => "format",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
