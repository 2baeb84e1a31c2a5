use thiserror::Error;

/// Errors raised by the tape, the learners and the training loops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor dims {dims:?} do not match data length {len}")]
    BadShape { dims: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("log of non-positive value")]
    LogDomain,

    #[error("gradient output must be a scalar, got dims {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("label row {0} is not one-hot")]
    NotOneHot(usize),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("non-finite outer loss at iteration {iteration}")]
    Diverged { iteration: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
