use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed descriptor {path}: {msg}")]
    Descriptor { path: PathBuf, msg: String },
    #[error("attribute `{name}`: raw file {path} has {actual} bytes, expected {expected}")]
    SizeMismatch {
        name: String,
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("volume needs at least 2 attributes, got {0}")]
    TooFewAttributes(usize),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("need at least {needed} samples for local PCA, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("missing cache artifact {0}; run `precompute` first")]
    MissingCache(PathBuf),
    #[error("corrupt cache artifact {path}: {msg}")]
    CorruptCache { path: PathBuf, msg: String },
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
