use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("domain error in {op}: {count} offending element(s), first at index {first}")]
    Domain { op: &'static str, count: usize, first: usize },

    #[error("unsupported configuration for {op}: {reason}")]
    Unsupported { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("batch norm in eval mode has no running statistics yet")]
    NoRunningStats,

    #[error("degenerate denominator: {0}")]
    Degenerate(&'static str),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("incompatible checkpoint {path}: {reason}")]
    Incompatible { path: PathBuf, reason: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("bad manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}
