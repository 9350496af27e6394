//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or operation received incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward or backward result contained NaN or Inf.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A tensor was requested with a zero or negative dimension.
    #[error("invalid tensor dimension: {0:?}")]
    BadDimension(Vec<usize>),

    /// Backward was asked to start from a non-scalar or unknown node.
    #[error("invalid backward seed: {0}")]
    BadLoss(String),

    #[error("parameter {0:?} registered twice on one tape")]
    DuplicateParam(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("mutual information estimate failed: {0}")]
    Mi(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
