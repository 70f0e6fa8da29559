use thiserror::Error;

use crate::qp::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A scalar parameter is outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    Parameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(String),

    /// A filter step was rejected; the state it was applied to is unchanged.
    #[error("step {step} rejected: solver status {status:?} (kkt residual {kkt_residual:.3e})")]
    StepRejected {
        step: usize,
        status: SolveStatus,
        kkt_residual: f64,
    },

    #[error("horizon exceeds batch cap ({horizon} > {cap})")]
    HorizonExceedsCap { horizon: usize, cap: usize },

    #[error("batch solve failed: solver status {0:?}")]
    BatchSolve(SolveStatus),

    #[error("simulation diverged at step {step} (state norm {norm:.3e}); use a stable A")]
    SimulationDiverged { step: usize, norm: f64 },
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }
}
