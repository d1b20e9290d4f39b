//! Crate-wide error type.
//!
//! Errors carry a coarse [`ErrorKind`] so the CLI can map failures onto its
//! documented exit codes (config = 2, data = 3, numeric = 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),

    #[error("parameter spec hash mismatch: expected {expected}, got {got}")]
    SpecHashMismatch { expected: String, got: String },

    #[error("parameter `{key}` value {value} outside range [{lo}, {hi}]")]
    OutOfRange {
        key: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("parameter `{key}` value {value} is not on the discrete grid")]
    OffGrid { key: String, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnknownGenerator(_) | Error::Config(_) => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::SpecHashMismatch { .. }
            | Error::OutOfRange { .. }
            | Error::OffGrid { .. }
            | Error::DimensionMismatch { .. }
            | Error::Data(_)
            | Error::Graph(_)
            | Error::Io { .. }
            | Error::Serde(_)
            | Error::Image(_) => ErrorKind::Data,
        }
    }
}
