use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these categories.
///
/// The `Display` form always starts with the category name so that the CLI
/// can print it verbatim as a category-prefixed message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("training error: loss diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f32 },

    #[error("correlation error: {0}")]
    UndefinedCorrelation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used for exit-code mapping in the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Argument(_) => "argument",
            Error::NonFinite(_) => "numeric",
            Error::Training { .. } => "training",
            Error::UndefinedCorrelation(_) => "correlation",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
