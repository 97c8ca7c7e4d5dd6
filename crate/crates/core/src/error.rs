use thiserror::Error;

use crate::scheduler::ServingTimeline;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid block id {block_id} (network has {n_blocks} blocks)")]
    InvalidBlock { block_id: usize, n_blocks: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A block whose removal saves no latency; its importance would be infinite.
    #[error("degenerate block {block_id}: latency saving is {delta_t}")]
    DegenerateBlock { block_id: usize, delta_t: f64 },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("training diverged: train accuracy {accuracy:.3} below {threshold:.3}")]
    TrainingDiverged { accuracy: f64, threshold: f64 },

    /// The sample stream ended before the serving loop could finish its work.
    #[error("stream exhausted in phase {phase} after {served} samples")]
    PartialRun {
        phase: String,
        served: usize,
        timeline: Box<ServingTimeline>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Coarse class used by the CLI to choose an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numeric(_) | Error::DegenerateBlock { .. } | Error::TrainingDiverged { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numeric,
}
