use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("line {line}: {what} dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        line: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("nothing to train on: every prior cluster is masked out and no co-training target is set")]
    EmptyTrainingSet,

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("corrupted tape: {0}")]
    CorruptedTape(String),

    #[error("empty selection: no cluster has a positive score")]
    EmptySelection,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from bad user input (config, flags, arguments)
    /// rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Unsupported(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
