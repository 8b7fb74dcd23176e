//! Error type shared across the crate.
//!
//! The CLI maps variants onto stable exit codes: configuration and input
//! problems exit 2, numeric failures exit 3.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, including shape mismatches that stem from it.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input: bad file, malformed manifest, empty dataset.
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite loss or otherwise degenerate numerics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An invariant the library should have upheld was violated.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
