use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "system is singular after ridge {ridge:e} (dim {dim}, trace {trace:e}, smallest pivot {min_pivot:e})"
    )]
    Singular {
        dim: usize,
        trace: f64,
        ridge: f64,
        min_pivot: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm key cannot be stored")]
    ZeroKey,

    #[error("duplicate fact id {0}")]
    DuplicateId(u64),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("residual fit diverged at step {step} (loss trace: {trace:?})")]
    Divergence { step: usize, trace: Vec<f64> },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding the binary database / checkpoint framing.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("unsupported format header: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("file truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: u64, actual: u64 },

    #[error("checksum mismatch: header says {stored:#010x}, payload hashes to {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),
}
