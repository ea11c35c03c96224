use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid model construction: {0}")]
    Construction(String),

    #[error("step {step} out of range (valid {lo}..={hi})")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("non-finite value at step {step}{}", block.map(|b| format!(", block {b}")).unwrap_or_default())]
    NonFinite { step: usize, block: Option<usize> },

    #[error("stale cache: entry {entry} has no stored delta at utilization step {step}")]
    StaleCache { entry: String, step: usize },

    #[error("run provenance mismatch: {0}")]
    Provenance(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 3,
        }
    }
}
