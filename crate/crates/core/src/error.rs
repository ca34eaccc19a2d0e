use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RftfError>;

#[derive(Debug, Error)]
pub enum RftfError {
    /// Shapes, dimensions, or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numerical error at {location}: {detail}")]
    Numerical { location: String, detail: String },

    /// An operation was called outside of its contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("environment misconfiguration: {0}")]
    Environment(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RftfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RftfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(location: impl Into<String>, detail: impl Into<String>) -> Self {
        RftfError::Numerical {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
