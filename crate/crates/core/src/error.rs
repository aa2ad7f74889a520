use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("{what} out of range: {value} (expected {expected})")]
    OutOfRange {
        what: &'static str,
        value: String,
        expected: &'static str,
    },

    #[error("signal too short: {what} needs at least {required} samples, got {actual}")]
    TooShort {
        what: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("signal has no energy")]
    Silent,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("time {t} s is beyond the schedule end ({end} s)")]
    BeyondSchedule { t: f64, end: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated data while reading {0}")]
    Truncated(&'static str),

    #[error("unsupported WAV format in {path}: {reason}")]
    WavFormat { path: PathBuf, reason: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn out_of_range(
    what: &'static str,
    value: impl ToString,
    expected: &'static str,
) -> Error {
    Error::OutOfRange {
        what,
        value: value.to_string(),
        expected,
    }
}
