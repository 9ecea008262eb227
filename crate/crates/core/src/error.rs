// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or vector lengths disagree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity appeared in an op input or output.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index (token id, class target, row) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A caller violated an API contract (non-scalar loss, count mismatch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid model input (overlong prompt, unknown token).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid tap specification for a model or prompt.
    #[error("tap error: {0}")]
    Tap(String),

    /// Malformed or truncated file.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged.
    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
