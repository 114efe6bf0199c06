use std::path::PathBuf;

/// Errors raised across the crate. The variants follow the failure classes the
/// command-line driver maps onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, widths or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad user-provided data (images, labels, manifests).
    #[error("input error: {0}")]
    Input(String),
    /// A function was called outside its documented preconditions.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A loss or gradient turned non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, input_err};
