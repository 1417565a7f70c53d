use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid UTF-8 at byte offset {offset}")]
    Utf8 { offset: usize },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("transition matrix is not ergodic: {0}")]
    NotErgodic(String),

    #[error("training aborted at epoch {epoch}, batch {batch} (lr {lr}): {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        reason: String,
    },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error(
        "vocabulary hash mismatch: checkpoint expects {expected}, vocabulary file has {found}"
    )]
    VocabMismatch { expected: String, found: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
