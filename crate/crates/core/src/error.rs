use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ATF file: {field}: {reason}")]
    AtfFormat { field: String, reason: String },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range for {what} (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate target: reference gain below 1e-12 at bins {bins:?}")]
    DegenerateTarget { bins: Vec<usize> },

    #[error("covariance solve failed at bins {bins:?}")]
    SingularCovariance { bins: Vec<usize> },

    #[error("nonpositive noise power at bins {bins:?}")]
    NonpositiveDenominator { bins: Vec<usize> },

    #[error("frame {frame}: {reason}")]
    Frame { frame: usize, reason: String },

    #[error("no pose for {participant} at t={time:.6}s (first sample at {first:.6}s)")]
    NoPoseYet {
        participant: String,
        time: f64,
        first: f64,
    },

    #[error("degenerate direction: target coincides with wearer")]
    DegenerateDirection,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown participant {0:?}")]
    UnknownParticipant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported audio codec: {0}")]
    UnsupportedCodec(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("frame ordering: expected frame {expected}, got {got}")]
    FrameOrder { expected: u64, got: u64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
