use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by the CLI exit code they map to: container and
/// configuration problems are data errors (2), everything numeric is 3.
#[derive(Debug, Error)]
pub enum GscError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value at position {position}")]
    NonFinite { position: usize },

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(&'static str),

    #[error("insufficient calibration data: need at least {required} scores, got {actual}")]
    InsufficientCalibration { required: usize, actual: usize },

    #[error("top-k ratio undefined for an all-zero gradient")]
    UndefinedRatio,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generator invariant unattainable within retry budget: {0}")]
    Unattainable(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("length mismatch in {}: expected {expected} bytes, found {actual}", file.display())]
    LengthMismatch {
        file: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("manifest dimension mismatch: {0}")]
    ManifestDims(String),

    #[error("unknown activation {0:?}")]
    UnknownActivation(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl GscError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            GscError::Dimension { .. }
            | GscError::Empty(_)
            | GscError::Index { .. }
            | GscError::NonFinite { .. }
            | GscError::DegenerateGradient(_)
            | GscError::InsufficientCalibration { .. }
            | GscError::UndefinedRatio => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = GscError> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(GscError::Dimension {
            context,
            expected,
            actual,
        })
    }
}
