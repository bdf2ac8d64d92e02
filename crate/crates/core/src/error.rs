use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no events in stratum")]
    NoEvents,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite likelihood term at beta = {beta:?}")]
    NonFinite { beta: Vec<f64> },

    #[error("singular Hessian (reciprocal condition {rcond:.3e})")]
    SingularHessian { rcond: f64 },

    #[error("step halving exhausted without increasing the log-likelihood")]
    LineSearchFailed,

    #[error("no convergence after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("column {0} has no observed values")]
    EmptyColumn(String),

    #[error("no patients remain after filtering")]
    NoPatientsRemain,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = CoxError> = std::result::Result<T, E>;
