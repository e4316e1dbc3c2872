use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("subject `{subject}` excluded: {reason}")]
    Excluded {
        subject: String,
        reason: ExclusionReason,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint payload truncated: need {needed} bytes, found {found}")]
    CheckpointTruncated { needed: u64, found: u64 },

    #[error("checkpoint array `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Why a subject was dropped during preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    InsufficientConsecutiveDays,
    MissingDemographics,
    InvalidSppb,
    TooShort,
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExclusionReason::InsufficientConsecutiveDays => "insufficient_consecutive_days",
            ExclusionReason::MissingDemographics => "missing_demographics",
            ExclusionReason::InvalidSppb => "invalid_sppb",
            ExclusionReason::TooShort => "too_short",
        };
        f.write_str(s)
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Stable machine-readable category used by the command-line driver.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => "numeric",
            Error::NotScalar(_) | Error::InvalidArgument(_) => "argument",
            Error::InvalidConfig(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Excluded { .. } => "excluded",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CheckpointTruncated { .. } => "checkpoint_payload",
            Error::CheckpointShape { .. } => "checkpoint_shape",
            Error::CheckpointCorrupt(_) => "checkpoint_corrupt",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
