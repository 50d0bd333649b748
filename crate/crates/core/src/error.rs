use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("sign of NaN is undefined")]
    NanSign,

    #[error("cannot rescale a zero vector to norm {target}")]
    ZeroRescale { target: f64 },

    #[error("zero-norm input: {0}")]
    ZeroInput(String),

    #[error("degenerate baseline: every randomized image has zero norm (is W all-zero?)")]
    DegenerateBaseline,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot resolve module type for: {}", .0.join(", "))]
    UnresolvedModules(Vec<String>),

    #[error("requested {k} module types but only {available} are present")]
    TooManyTypes { k: usize, available: usize },

    #[error("token id {token} at sequence {sequence}, position {position} is out of range (vocab {vocab})")]
    TokenOutOfRange {
        token: u32,
        sequence: usize,
        position: usize,
        vocab: usize,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("bundle format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
