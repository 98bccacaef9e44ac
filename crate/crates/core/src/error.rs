//! Error type shared by every module of the simulator.

use thiserror::Error;

/// Everything that can go wrong while building, training or evaluating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{field}`: {reason}")]
    Range { field: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {tensor}: expected {expected}, found {found}")]
    Shape {
        tensor: String,
        expected: String,
        found: String,
    },

    #[error("cannot normalize {0}: vector has zero norm")]
    ZeroNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("transport solver failed at lambda = {lambda}: {detail}; increase lambda")]
    Transport { lambda: f64, detail: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numerical,
    Io,
    Protocol,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Numerical => 3,
            ErrorCategory::Io => 4,
            ErrorCategory::Protocol => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
            ErrorCategory::Protocol => "protocol",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::Range { .. }
            | Error::Dimension { .. }
            | Error::Shape { .. }
            | Error::Parse(_) => ErrorCategory::Config,
            Error::ZeroNorm(_)
            | Error::NonFinite(_)
            | Error::Transport { .. }
            | Error::GradCheck(_) => ErrorCategory::Numerical,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => ErrorCategory::Io,
            Error::Protocol(_) => ErrorCategory::Protocol,
        }
    }

    pub(crate) fn range(field: &str, reason: impl Into<String>) -> Self {
        Error::Range {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(what: &str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what: what.to_string(),
            expected,
            actual,
        }
    }
}
