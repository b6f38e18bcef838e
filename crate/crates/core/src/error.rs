use std::path::PathBuf;

use thiserror::Error;

/// Parse failures for SITSB dataset files. Every variant names the byte
/// offset at which decoding failed.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("truncated payload at offset {offset}: {what} needs {needed} bytes, {available} available")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("label {label} at offset {offset} is out of range for K = {n_classes}")]
    LabelOutOfRange {
        offset: usize,
        label: u16,
        n_classes: usize,
    },
    #[error("non-finite feature value at offset {offset}")]
    NonFinite { offset: usize },
    #[error("invalid domain tag {tag} at offset {offset}")]
    BadDomainTag { offset: usize, tag: u8 },
    #[error("invalid UTF-8 class name at offset {offset}")]
    BadClassName { offset: usize },
    #[error("non-zero reserved header field at offset {offset}")]
    Reserved { offset: usize },
    #[error("{trailing} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, trailing: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(#[from] FormatError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unrecoverable gap: series has no valid observation")]
    UnrecoverableGap,
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Error {
    /// Stable short name used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Json(_) => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::OutOfRange(_) => "out_of_range",
            Error::InvalidInput(_) => "invalid_input",
            Error::UnrecoverableGap => "unrecoverable_gap",
            Error::NonFinite(_) => "non_finite",
            Error::CheckFailed(_) => "check_failed",
        }
    }

    /// Process exit code for the CLI. Each error family gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotFound(_) => 3,
            Error::Format(_) | Error::Json(_) | Error::Checkpoint(_) => 4,
            Error::Config(_) => 5,
            Error::Shape(_) | Error::OutOfRange(_) | Error::InvalidInput(_) => 6,
            Error::UnrecoverableGap | Error::NonFinite(_) => 7,
            Error::Io(_) => 8,
            Error::CheckFailed(_) => 9,
        }
    }
}
