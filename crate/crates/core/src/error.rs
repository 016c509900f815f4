use thiserror::Error;

use crate::io::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid input or a violated contract (bad config, overlapping splits, ...).
    Contract,
    /// Reading or writing a file failed, or a file was malformed.
    Format,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid temperature {0}: must be finite and > 0")]
    InvalidTemperature(f64),

    #[error("invalid alpha {0}: must lie in (0, 1)")]
    InvalidAlpha(f64),

    #[error("empty support: every token is masked out")]
    EmptySupport,

    #[error("{}target {target_id} not in support", sample_prefix(.sample_id))]
    TargetNotInSupport {
        sample_id: Option<String>,
        target_id: u32,
    },

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("no validation data")]
    NoValidationData,

    #[error("no test data")]
    NoTestData,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("logit at index {index} is {value}; only finite values or -inf are allowed")]
    NonFiniteLogit { index: usize, value: f64 },

    #[error("mask mismatch: calibration was built with mask {expected:?}, got {found:?}")]
    MaskMismatch {
        expected: Option<String>,
        found: Option<String>,
    },

    #[error("overlapping splits: {count} sample id(s) appear in both {first} and {second}, e.g. {example:?}")]
    OverlappingSplits {
        first: String,
        second: String,
        count: usize,
        example: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

fn sample_prefix(sample_id: &Option<String>) -> String {
    match sample_id {
        Some(id) => format!("sample {id:?}: "),
        None => String::new(),
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Format(_) => ErrorKind::Format,
            _ => ErrorKind::Contract,
        }
    }

    /// Attaches a sample id to a `TargetNotInSupport` error; other errors pass through.
    pub(crate) fn with_sample(self, id: &str) -> Self {
        match self {
            Error::TargetNotInSupport { target_id, .. } => Error::TargetNotInSupport {
                sample_id: Some(id.to_owned()),
                target_id,
            },
            other => other,
        }
    }
}
