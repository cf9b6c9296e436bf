use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// [`Error::kind`] gives the stable machine-readable class name used in the
/// CLI's JSON error output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fringe stack: {}", .0.join("; "))]
    InvalidStack(Vec<String>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("point lies behind the camera (s = {0})")]
    BehindCamera(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("insufficient calibration poses: {0} given, at least 4 required")]
    InsufficientPoses(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("solver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("region selection is empty: {0}")]
    EmptyRegion(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("uncertainty budget has no components")]
    EmptyBudget,

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidStack(_) => "InvalidStack",
            Error::Domain(_) => "DomainError",
            Error::BehindCamera(_) => "BehindCamera",
            Error::Config(_) => "ConfigError",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InsufficientPoses(_) => "InsufficientPoses",
            Error::EmptyInput(_) => "EmptyInput",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NoConvergence(_) => "NoConvergence",
            Error::EmptyRegion(_) => "EmptyRegion",
            Error::InsufficientData(_) => "InsufficientData",
            Error::EmptyBudget => "EmptyBudget",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
