use std::path::PathBuf;

/// Errors produced by the mining pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid seed sets: {0}")]
    Seeds(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration for `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("position {position} out of range for sequence of length {len}")]
    OutOfRange { position: usize, len: usize },

    #[error("invalid span [{start}, {end}) for sequence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown label index {index} (label table has {len} entries)")]
    UnknownLabel { index: usize, len: usize },

    #[error("unknown product id `{0}`")]
    UnknownProduct(String),

    #[error("unknown product type `{0}`")]
    UnknownProductType(String),

    #[error("no positive training pair could be built; provide at least two seed values that occur in the corpus for some attribute")]
    NoPositivePairs,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("external encoder: {0}")]
    External(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("stage `{stage}`{}: {source}", iteration.map(|k| format!(" (iteration {k})")).unwrap_or_default())]
    Stage {
        stage: String,
        iteration: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for configuration errors, also when wrapped in a stage error.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn in_stage(self, stage: &str, iteration: Option<usize>) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_owned(),
                iteration,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
