use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VredError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("malformed stream: {0}")]
    Format(String),

    #[error("model digest mismatch: stream was encoded with {expected}, checkpoint is {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("undefined reference: {0}")]
    UndefinedReference(String),

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VredError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        VredError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VredError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            VredError::Contract(_) | VredError::Internal(_) | VredError::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, VredError>;
