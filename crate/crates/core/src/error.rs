use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity error: requested {requested} neighbors but only {available} rows are available")]
    Capacity { requested: usize, available: usize },

    #[error("numeric error for sample {id}: {reason}")]
    Numeric { id: u64, reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("coverage error: missing ids {missing:?}, duplicate ids {duplicate:?}")]
    Coverage { missing: Vec<u64>, duplicate: Vec<u64> },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) | Error::Leakage(_) => 2,
            Error::Format { .. }
            | Error::Data(_)
            | Error::Numeric { .. }
            | Error::Coverage { .. }
            | Error::UndefinedMetric(_)
            | Error::Fingerprint(_)
            | Error::Io { .. } => 3,
            Error::Capacity { .. } => 4,
            Error::Divergence { .. } => 5,
        }
    }
}
