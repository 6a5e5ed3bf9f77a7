use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pattern leaves the frame: {0}")]
    OutOfBounds(String),

    #[error("format error in {path} at `{entry}`: {reason}")]
    Format {
        path: PathBuf,
        entry: String,
        reason: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl OffError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        OffError::InvalidShape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        OffError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        OffError::Config(msg.into())
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        entry: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        OffError::Format {
            path: path.into(),
            entry: entry.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| OffError::Io { context, source }
    }
}
