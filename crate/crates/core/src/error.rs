use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{function}: argument {value} is outside the domain ({reason})")]
    Domain {
        function: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("factorization failed for wavenumber {wavenumber} on a {size}x{size} grid: {reason}")]
    Factorization {
        wavenumber: f64,
        size: usize,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { path: PathBuf, stored: u32, computed: u32 },

    #[error("unsupported format version {found} in {path} (this build reads version {supported})")]
    Version { path: PathBuf, found: u32, supported: u32 },

    #[error("split mismatch: {0}")]
    SplitMismatch(String),

    #[error("refusing to overwrite existing {0} (pass --force)")]
    AlreadyExists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::AlreadyExists(_) => ErrorClass::Config,
            Error::Domain { .. } | Error::NonFinite(_) | Error::Factorization { .. } | Error::Numeric(_) => {
                ErrorClass::Numeric
            }
            Error::ShapeMismatch { .. }
            | Error::Format { .. }
            | Error::Checksum { .. }
            | Error::Version { .. }
            | Error::SplitMismatch(_)
            | Error::Io { .. }
            | Error::Json(_) => ErrorClass::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
