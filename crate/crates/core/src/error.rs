use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DviError>;

#[derive(Debug, Error)]
pub enum DviError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a DVT file")]
    BadMagic,

    #[error("unsupported tensor rank {0} (expected 2 or 3)")]
    UnsupportedRank(u8),

    #[error("payload length mismatch: header declares {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("dimension {0} does not fit in u32")]
    DimOverflow(usize),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("{what}: expected {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<DviError>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl DviError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn mismatch(
        what: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Self::DimMismatch {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
