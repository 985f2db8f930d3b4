use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("idx format error: {0}")]
    IdxFormat(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter layout does not match the model layout")]
    LayoutMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("privacy accounting error: {0}")]
    Accounting(String),

    #[error("quadrature failed to converge to tolerance {tol:e} (max depth {depth})")]
    QuadratureDiverged { tol: f64, depth: usize },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("coordination error: {0}")]
    Coordination(String),

    #[error("ledger error: {0}")]
    Ledger(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}
