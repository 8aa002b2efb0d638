use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("degenerate batch in {op}: {msg}")]
    DegenerateBatch { op: &'static str, msg: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("ingestion failed for {root}: {}", .problems.join("; "))]
    Ingest { root: PathBuf, problems: Vec<String> },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    #[error("training aborted at episode {episode}: {reason}")]
    TrainingAborted { episode: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
