//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or extents.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An operation was called outside its contract (non-scalar loss,
    /// K < 2, negative iteration count, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or Inf produced where the contract requires finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file content (bad magic, truncated payload, wrong maxval).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration (unknown key, out-of-range value).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level problems (empty split, class too small, missing weights).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/format/io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Format(_) | Error::Data(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Dim(_) | Error::Contract(_) | Error::Numeric(_) => 3,
        }
    }
}
