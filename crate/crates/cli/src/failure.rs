use std::fmt;

use neuraldb::Error;

/// A run failure: a category, a one-line reason and the exit status.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub reason: String,
    pub code: u8,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

impl Failure {
    /// Invalid settings, reported before any work starts.
    pub fn config(reason: impl Into<String>) -> Self {
        Self {
            kind: "config",
            reason: reason.into(),
            code: EXIT_USAGE,
        }
    }

    pub fn runtime(kind: &'static str, reason: impl Into<String>) -> Self {
        Self {
            kind,
            reason: reason.into(),
            code: EXIT_RUNTIME,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::runtime("io", format!("{}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Parse { .. } | Error::DuplicateId(_) => "input",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Singular { .. } | Error::NonFinite(_) | Error::Divergence { .. } => "numeric",
            Error::DimensionMismatch { .. } => "dimension",
            Error::InvalidArgument(_) | Error::ZeroKey => "invalid",
        };
        Self::runtime(kind, e.to_string())
    }
}

impl fmt::Display for Failure {
    /// `error: kind=<kind> reason="<escaped reason>"`, always on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = serde_json::to_string(&self.reason).unwrap();
        write!(f, "error: kind={} reason={reason}", self.kind)
    }
}
