use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while reading or writing the binary dataset and checkpoint
/// formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: Vec<u8> },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated inside record {record}")]
    Truncated { record: usize },
    #[error("inconsistent shape header: {0}")]
    ShapeHeader(String),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on {axis}: expected {expected}, found {found} ({context})")]
    Dimension {
        axis: String,
        expected: String,
        found: String,
        context: &'static str,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite values in tensor `{tensor}`")]
    NonFinite { tensor: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(
        context: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected: expected.to_string(),
            found: found.to_string(),
            context,
        }
    }
}
