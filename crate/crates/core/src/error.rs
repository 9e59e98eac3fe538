//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("vehicle {vehicle} is not associated with merge point {merge_point}")]
    NotApplicable { vehicle: u64, merge_point: usize },

    #[error("unknown communication node {0}")]
    UnknownNode(String),

    #[error("sequence matrix must be square, got {rows}x{cols}")]
    MatrixShape { rows: usize, cols: usize },

    #[error("infeasible sequence matrix passed to objective")]
    InfeasibleSequence,

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "collision at t={time:.1}s between vehicles {a} and {b} (gap {gap:.3} m at merge point {merge_point:?})"
    )]
    Collision {
        time: f64,
        a: u64,
        b: u64,
        gap: f64,
        merge_point: Option<usize>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
