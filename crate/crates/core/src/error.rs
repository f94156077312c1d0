use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("ingest error: band {band}, pixel ({x}, {y}) has value {value} > vmax {vmax}")]
    Ingest {
        band: usize,
        x: usize,
        y: usize,
        value: u64,
        vmax: u32,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error class (0 is reserved for success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io(_) | Error::Format(_) => 2,
            Error::Shape(_)
            | Error::Domain(_)
            | Error::Index(_)
            | Error::Ingest { .. }
            | Error::UndefinedMetric(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
