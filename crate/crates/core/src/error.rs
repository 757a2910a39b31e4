use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. The CLI maps these onto exit codes
/// through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("audio is {duration:.3} s long, over the {limit} s limit")]
    OverLength { duration: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of {len} positions exceeds the context limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("no target positions carry loss")]
    EmptyTarget,

    #[error("data contract violated by sample {sample}: {reason}")]
    DataContract { sample: String, reason: String },

    #[error("loss diverged at step {step} of stage {stage} (loss = {loss})")]
    Divergence { stage: String, step: usize, loss: f64 },

    #[error("stage order violated: expected {expected}, got {got}")]
    StageOrder { expected: String, got: String },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("duration error: {0}")]
    Duration(String),

    #[error("audio spec error: {0}")]
    Spec(String),

    #[error("need at least {needed} distinct labels, found {found}")]
    InsufficientLabels { needed: usize, found: usize },

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    DataContract,
    Divergence,
    Corruption,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DataContract { .. } | Error::OverLength { .. } | Error::Duration(_) => ErrorKind::DataContract,
            Error::Divergence { .. } | Error::NonFinite(_) => ErrorKind::Divergence,
            Error::Corrupt(_) | Error::Incompatible(_) | Error::Io { .. } | Error::Wav(_) => ErrorKind::Corruption,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
