use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the token-sharing pipeline.
#[derive(Debug, Error)]
pub enum CtsError {
    /// Incompatible tensor or grid shapes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid configuration (geometry, dataset, schedule).
    #[error("config error: {0}")]
    Config(String),
    /// API misuse: out-of-range arguments, non-scalar loss, empty settings.
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad input values such as out-of-range class ids.
    #[error("input error: {0}")]
    Input(String),
    /// Malformed CTSF/CTSM data.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CtsError> = std::result::Result<T, E>;

impl CtsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtsError::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::CtsError::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::CtsError::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::CtsError::Usage(format!($($arg)*)) };
}
pub(crate) use {config_err, dim_err, usage_err};
