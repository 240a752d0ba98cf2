use std::path::PathBuf;

use crate::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value while processing sample {sample}")]
    NumericOverflow { sample: SampleId },

    /// The loss distribution cannot be split; callers should treat every
    /// sample as low-loss.
    #[error("degenerate mixture fit: {0}; treat all samples as low-loss")]
    DegenerateFit(String),

    #[error("no low-loss samples to build proxies from")]
    EmptyProxies,

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
