use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could not generate a connected Erdős–Rényi graph with n={n}, p={p} after {attempts} attempts")]
    Unconnectable { n: usize, p: f64, attempts: usize },

    #[error("graph is not connected")]
    Disconnected,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("matrix is not doubly stochastic: {0}")]
    NotDoublyStochastic(String),

    #[error("mixing matrix has no spectral gap (rho = {rho}); use the lazy Metropolis variant")]
    NoSpectralGap { rho: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("attention requires at least one active neighbor")]
    EmptyActiveSet,

    #[error("neighbor {0} has no cached head")]
    MissingNeighborHead(usize),

    #[error("attention cache does not match the current state: {0}")]
    StaleCache(String),

    #[error("agent {from} attempted to send to non-neighbor {to}")]
    NonEdge { from: usize, to: usize },

    #[error("empty training shard on agent {0}")]
    EmptyShard(usize),

    #[error("constant c = {c} violates 0 < c < 1/2 - 8 eta^2 T^2 L^2 = {limit}")]
    DescentConstant { c: f64, limit: f64 },

    #[error("idx file {path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("idx file {path}: truncated ({got} bytes, expected {expected})")]
    IdxTruncated { path: PathBuf, got: usize, expected: usize },

    #[error("idx files disagree on item count: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
