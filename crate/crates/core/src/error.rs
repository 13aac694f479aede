use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure classes for the toolkit.
///
/// The CLI maps each class to a distinct process exit code, so the variants
/// are kept coarse: file-system trouble, bad inputs or configuration, and
/// numerical breakdown inside an algorithm.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this failure class. Code 2 is left to the
    /// argument parser for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Invalid(_) => 4,
            Error::Numerical(_) => 5,
        }
    }

    pub(crate) fn from_hound(path: &Path, err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::invalid(format!("{}: {other}", path.display())),
        }
    }
}
