//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any attnpipe operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix has zero rows or columns")]
    EmptyMatrix,
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("unsupported bit width {0}, expected 1, 2, 4 or 8")]
    UnsupportedBits(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("quantization scheme mismatch: {0}")]
    SchemeMismatch(String),
    #[error("mask row {0} has no attendable position")]
    AllMaskedRow(usize),
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("zero total attention mass")]
    ZeroMass,
    #[error("operator graph contains a cycle")]
    CyclicGraph,
    #[error("node {node} requires {required} compute units at parallelism 1, budget is {budget}")]
    NodeExceedsBudget {
        node: usize,
        required: u64,
        budget: u64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("traces cover different workloads: {0}")]
    WorkloadMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation failed for `{field}`: {reason}")]
    Validation { field: String, reason: String },
    #[error("infeasible length stats: avg {avg} must lie in [1, max) with max {max}")]
    InfeasibleStats { avg: f64, max: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
