use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] lethe_core::Error),

    #[error("config error: {0}")]
    Config(String),

    /// The pretrained model is already at or below the stop accuracy.
    #[error("model unusable: baseline accuracy {baseline} is at or below the stop threshold {threshold}")]
    UnusableBaseline { baseline: f64, threshold: f64 },

    #[error("csv error in {}: {message}", path.display())]
    Csv { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HarnessError::Csv {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
