use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation workflow.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {context}: {message}")]
    Csv { context: String, message: String },

    /// Grid, stripe or tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range; the field name comes first.
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    /// The caller supplied an empty or otherwise unusable input.
    #[error("usage error: {0}")]
    Usage(String),

    /// A precondition on the data itself (not its shape) was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("incompatible checkpoint: found format version {found}, expected {expected}")]
    Incompatible { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
