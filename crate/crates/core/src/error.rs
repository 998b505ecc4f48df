use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// No point of the cloud lands inside the view frustum.
    #[error("empty view: {0}")]
    EmptyView(String),

    /// A file parsed but lacks something required.
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("unknown scene id {id:?} (available: {available})")]
    UnknownScene { id: String, available: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::EmptyView(_) => "empty-view",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Incompatible(_) => "incompatible",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::UnknownScene { .. } => "unknown-scene",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

/// Attach a path to an I/O error.
pub(crate) fn with_path<T>(path: &std::path::Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}
