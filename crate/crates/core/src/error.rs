//! Crate-wide error type.

use thiserror::Error;

use crate::orchestrator::RunFailure;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An object is in a state the operation cannot work with.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A computation produced a non-finite intermediate value.
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    /// The bandwidth rule cannot produce a positive bandwidth.
    #[error("bandwidth undefined: {0}")]
    BandwidthUndefined(String),

    /// A kernel weight row summed to zero and cannot be normalized.
    #[error("degenerate kernel row {row}: every entry is outside the kernel support")]
    DegenerateRow { row: usize },

    /// A dual variable violates the feasibility margin for some moment value.
    #[error("infeasible dual for row {row}: 1 + lambda.g fell below the feasibility margin")]
    InfeasibleDual { row: usize },

    /// A linear system has no unique solution.
    #[error("singular system: {0}")]
    Singular(String),

    /// A simulation run aborted; the report carries the partial results.
    #[error("{0}")]
    RunAborted(Box<RunFailure>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<RunFailure> for Error {
    fn from(failure: RunFailure) -> Self {
        Error::RunAborted(Box::new(failure))
    }
}
