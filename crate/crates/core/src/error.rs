use std::path::PathBuf;

use crate::llm::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("m2 line {line}: {message}")]
    M2 { line: usize, message: String },

    #[error("unbound placeholder: {0}")]
    UnboundPlaceholder(String),

    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("{0}")]
    Embedding(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("database format version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt database: {0}")]
    Corruption(String),

    #[error("prediction count {predictions} does not match gold sentence count {gold}")]
    CountMismatch { predictions: usize, gold: usize },

    #[error("tokenization mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
