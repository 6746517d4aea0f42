use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed input at byte offset {offset}: {what}")]
    Format { offset: u64, what: String },

    #[error("training diverged at epoch {epoch} (non-finite loss); lower the learning rate")]
    Diverged { epoch: usize },

    #[error("patch optimization hit a non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(offset: usize, what: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            what: what.into(),
        }
    }

    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        Error::InvalidArgument(what.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics themselves rather than of the
    /// caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFiniteLoss { .. })
    }
}
