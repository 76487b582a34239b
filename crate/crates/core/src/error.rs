use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Fitting,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Fitting => 2,
            ErrorKind::Io => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("sample `{sample_id}`: {rule}")]
    Invariant { sample_id: String, rule: String },
    #[error("span coverage violated: {0}")]
    Coverage(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("alignment mismatch: {0}")]
    Alignment(String),
    #[error("duplicate {what}: {detail}")]
    Duplicate { what: &'static str, detail: String },
    #[error("unknown {what} `{id}`")]
    Unknown { what: &'static str, id: String },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("unidentifiable fit: {0}")]
    Unidentifiable(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("empty split `{0}`")]
    EmptySplit(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invariant(sample_id: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Invariant {
            sample_id: sample_id.into(),
            rule: rule.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Unidentifiable(_) | Error::FitFailed(_) | Error::NonFinite(_) => ErrorKind::Fitting,
            _ => ErrorKind::Validation,
        }
    }
}
