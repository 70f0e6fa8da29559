//! Robust recursive state estimation for linear dynamical systems.
//!
//! The estimators minimize dead-zone (epsilon-insensitive) quadratic or Huber
//! measurement losses, optionally under linear inequality constraints on states
//! and disturbances. Each step has the structure of a Kalman update whose
//! innovation passes through a small dual QP ([`qp`]). The [`batch`] module
//! solves the same problems over a whole horizon and serves as a reference.

pub mod batch;
pub mod error;
pub mod filters;
pub mod losses;
pub mod model;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
pub use filters::{Filter, FilterKind, FilterState};
pub use losses::{Kappa, LossKind, LossParams};
pub use model::{LinearConstraintSet, StateSpaceModel, StepConstraint, WeightConfig};
pub use qp::{InnovationProblem, InnovationSolution, SolveStatus, SolverOptions};
