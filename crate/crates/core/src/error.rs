use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants line up with the command-line exit-code contract: shape and
/// configuration problems are usage errors, data problems are input errors,
/// and checkpoint mismatches get their own class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
