use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("matrix is not symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix dimension {dim} exceeds eigensolver cap {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("malformed hypergraph: {0}")]
    MalformedHypergraph(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no conversations in dataset")]
    NoConversations,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid ablation: {0}")]
    Ablation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged {
        step: usize,
        last_finite: Box<crate::train::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
