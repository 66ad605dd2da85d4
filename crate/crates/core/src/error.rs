use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is missing, out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data violates an operation precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Pixel coordinates cannot be mapped onto the latent grid exactly.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A KV-cache entry was read at a timestep other than the one it was written at.
    #[error("stale kv-cache: {0}")]
    Staleness(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Broken internal invariant; never expected to surface to callers.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
macro_rules! internal_err {
    ($($arg:tt)*) => { $crate::error::Error::Internal(format!($($arg)*)) };
}
pub(crate) use {config_err, input_err, internal_err};
