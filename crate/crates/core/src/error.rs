use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid axes {axes:?} for tensor of rank {rank}")]
    InvalidAxes { axes: Vec<usize>, rank: usize },

    #[error("empty reduction extent in {op}")]
    EmptyReduction { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value in {stage}")]
    NonFinite { stage: String },

    #[error("kernel must be square, got {kh}x{kw}")]
    NonSquareKernel { kh: usize, kw: usize },

    #[error("kernel {kernel} larger than padded input {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },

    #[error("neighbour count k={k} out of range for {n} capsule types (need 1 <= k <= n-1)")]
    KOutOfRange { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("routing invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },

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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
