use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel {channel} is degenerate (std {std_dev:e} at or below tolerance)")]
    DegenerateSignal { channel: usize, std_dev: f64 },

    #[error("window {window} must be smaller than trace length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("trace of {len} samples exceeds the feature length {max}")]
    TraceTooLong { len: usize, max: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot average an empty set of fits")]
    EmptyFitSet,

    #[error("no training traces for nodule size {0} mm")]
    MissingClass(u8),

    #[error("metric undefined: {0} has a zero denominator")]
    UndefinedMetric(&'static str),

    #[error("no detection results to aggregate")]
    EmptyResults,

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable family name, used in machine-readable CLI errors.
    pub fn family(&self) -> &'static str {
        match self {
            Error::MissingInput(_) => "missing_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DegenerateSignal { .. }
            | Error::WindowTooLarge { .. }
            | Error::TraceTooLong { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidTrace(_) => "signal",
            Error::EmptyFitSet | Error::MissingClass(_) => "fit",
            Error::UndefinedMetric(_) | Error::EmptyResults => "eval",
            Error::Io { .. } | Error::Json(_) | Error::Csv(_) => "io",
        }
    }

    /// Process exit code for this error's family.
    pub fn exit_code(&self) -> i32 {
        match self.family() {
            "missing_input" => 3,
            "invalid_config" => 4,
            "signal" => 5,
            "fit" => 6,
            "eval" => 7,
            _ => 8,
        }
    }
}
