use std::path::PathBuf;

use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("{format} format error at offset {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("feature count mismatch for {stream} tokens: expected {expected}, found {found}")]
    CountMismatch {
        stream: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sampling failure at position {position}: no code token survives filtering")]
    Sampling { position: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this is a numeric failure (NaN/Inf) rather than a validation problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Diff(DiffError::NonFinite { .. })
                | Error::Diff(DiffError::NonFiniteGradient { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
