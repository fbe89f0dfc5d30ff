use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("payload size mismatch: expected {expected} scalars, found {found}")]
    PayloadSize { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("hash mismatch: checkpoint was trained against pipeline {expected}, got {found}")]
    HashMismatch { expected: String, found: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
