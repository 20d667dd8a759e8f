use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A layer or architecture description is inconsistent.
    #[error("configuration error at {layer}: {message}")]
    Config { layer: String, message: String },

    /// Caller-supplied data violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file does not follow the expected binary layout.
    #[error("format error: {0}")]
    Format(String),

    /// Two files that must agree (images/labels) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("unsupported checkpoint version {found} (newest supported is {supported})")]
    Version { found: u32, supported: u32 },

    /// Payload ended early or is otherwise damaged.
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("stale tape: parameters changed after the forward pass")]
    StaleTape,

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
