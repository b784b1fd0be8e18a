use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("full mapping would hold {entries} entries, above the cap of {cap}; use mango_apply")]
    CapExceeded { entries: usize, cap: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    Version { found: u16, expected: u16 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}

pub(crate) use {invalid, shape_err};

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.into())
    }
}
