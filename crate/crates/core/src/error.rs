use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: cannot normalize a zero or non-finite vector")]
    DegenerateVector,

    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate speaker mean for speaker {0}")]
    DegenerateSpeakerMean(u32),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("requested {requested} {kind} trials but only {available} distinct pairs exist")]
    InsufficientPairs {
        kind: &'static str,
        requested: usize,
        available: u128,
    },

    #[error("empty {0} score list")]
    EmptyScores(&'static str),

    #[error("non-finite value during training at epoch {epoch}, batch {batch}: {what}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("unknown variant `{name}`; available: {available}")]
    UnknownVariant { name: String, available: String },

    #[error("malformed input {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidTemperature(_)
                | Error::InvalidConfig { .. }
                | Error::LabelOutOfRange { .. }
                | Error::DimensionMismatch { .. }
                | Error::InsufficientPairs { .. }
                | Error::UnknownVariant { .. }
                | Error::Malformed { .. }
                | Error::Json(_)
        )
    }
}
