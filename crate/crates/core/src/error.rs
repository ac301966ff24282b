use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A constructed value violates one of its invariants. The message names it.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("no robust correspondences at iteration {iteration}: every match weight is zero")]
    NoCorrespondence { iteration: usize },

    #[error("numerical failure at iteration {iteration}: {reason}")]
    NumericalFailure { iteration: usize, reason: String },

    #[error("infeasible: residual {residual:.3e} exceeds tolerance {eps:.3e}; increase eps")]
    Infeasible { residual: f64, eps: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("eye patch extraction failed: {0}")]
    Extraction(String),

    #[error("degenerate scenario: {0}")]
    DegenerateScenario(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(iteration: usize, reason: impl Into<String>) -> Self {
        Error::NumericalFailure { iteration, reason: reason.into() }
    }
}
