//! Recursive estimators.
//!
//! Each step forms the innovation `y_{k+1} - C A x_k`, maps it through a small
//! dual QP to `theta` (and, with constraints, a multiplier `xi`), and applies
//!
//! ```text
//! x_{k+1} = A x_k + (A P^-1 A' + B Q^-1 B')(C' theta - U' xi) - B Q^-1 V' xi
//! ```
//!
//! With `epsilon = 0` and no cap, `theta` is the Kalman-transformed innovation
//! and the update coincides with the fixed-gain Kalman filter.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::{Kappa, LossKind, LossParams};
use crate::model::{spd_inverse, LinearConstraintSet, StateSpaceModel, StepConstraint, WeightConfig};
use crate::qp::{self, InnovationProblem, SolveStatus, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    EpsQuadratic,
    EpsHuber,
    ConstrainedEps,
    ConstrainedHuber,
    Kalman,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::EpsQuadratic,
        FilterKind::EpsHuber,
        FilterKind::ConstrainedEps,
        FilterKind::ConstrainedHuber,
        FilterKind::Kalman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::EpsQuadratic => "eps-quadratic",
            FilterKind::EpsHuber => "eps-huber",
            FilterKind::ConstrainedEps => "constrained-eps",
            FilterKind::ConstrainedHuber => "constrained-huber",
            FilterKind::Kalman => "kalman",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            FilterKind::EpsHuber | FilterKind::ConstrainedHuber => LossKind::Huber,
            _ => LossKind::Quadratic,
        }
    }

    pub fn is_constrained(self) -> bool {
        matches!(self, FilterKind::ConstrainedEps | FilterKind::ConstrainedHuber)
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown filter kind {s:?}")))
    }
}

/// Estimate after `step_index` measurements plus diagnostics of the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x_hat: DVector<f64>,
    pub step_index: usize,
    pub last_theta: DVector<f64>,
    pub last_xi: DVector<f64>,
    /// Re-estimate of the previous state after the latest measurement.
    pub last_posterior: DVector<f64>,
    /// Disturbance estimate of the latest step.
    pub last_disturbance: DVector<f64>,
    pub last_iterations: usize,
}

impl FilterState {
    /// Seeds the recursion with the prior best estimate `x0_bar`.
    pub fn initial(x0_bar: DVector<f64>, m: usize, l: usize) -> Self {
        Self {
            last_posterior: x0_bar.clone(),
            x_hat: x0_bar,
            step_index: 0,
            last_theta: DVector::zeros(m),
            last_xi: DVector::zeros(0),
            last_disturbance: DVector::zeros(l),
            last_iterations: 0,
        }
    }
}

/// A filter with the per-run matrices precomputed.
#[derive(Debug, Clone)]
pub struct Filter {
    kind: FilterKind,
    model: StateSpaceModel,
    epsilon: DVector<f64>,
    kappa: Vec<Kappa>,
    options: SolverOptions,
    p_inv: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    ca: DMatrix<f64>,
    cb: DMatrix<f64>,
    /// `C B Q^-1 B' C' + R^-1 + C A P^-1 A' C'`
    m_f: DMatrix<f64>,
    /// `A P^-1 A' + B Q^-1 B'`
    spread: DMatrix<f64>,
    p_inv_at: DMatrix<f64>,
    q_inv_bt: DMatrix<f64>,
    b_q_inv: DMatrix<f64>,
}

impl Filter {
    pub fn new(kind: FilterKind, model: &StateSpaceModel, weights: &WeightConfig, loss: &LossParams) -> Result<Self> {
        weights.check_against(model)?;
        if loss.dim() != model.m() {
            return Err(Error::dim("loss channels", model.m(), loss.dim()));
        }
        if matches!(kind, FilterKind::EpsQuadratic | FilterKind::ConstrainedEps) && !loss.all_kappa_infinite() {
            return Err(Error::Parameter(format!(
                "{kind} requires an infinite kappa on every channel"
            )));
        }
        let (epsilon, kappa) = match kind {
            FilterKind::Kalman => (DVector::zeros(model.m()), vec![Kappa::Infinite; model.m()]),
            _ => (loss.epsilon().clone(), loss.kappa().to_vec()),
        };
        let meas_inv = match kind.loss_kind() {
            LossKind::Quadratic => spd_inverse(weights.r(), "weight R")?,
            LossKind::Huber => DMatrix::from_diagonal(&loss.r().map(|r| 1.0 / r)),
        };

        let (a, b, c) = (model.a(), model.b(), model.c());
        let p_inv = spd_inverse(weights.p(), "weight P")?;
        let q_inv = spd_inverse(weights.q(), "weight Q")?;
        let ca = c * a;
        let cb = c * b;
        let m_f = &cb * &q_inv * cb.transpose() + &meas_inv + &ca * &p_inv * ca.transpose();
        let m_f = (&m_f + m_f.transpose()) * 0.5;
        let spread = a * &p_inv * a.transpose() + b * &q_inv * b.transpose();
        Ok(Self {
            kind,
            model: model.clone(),
            epsilon,
            kappa,
            options: SolverOptions::default(),
            p_inv_at: &p_inv * a.transpose(),
            q_inv_bt: &q_inv * b.transpose(),
            b_q_inv: b * &q_inv,
            p_inv,
            q_inv,
            ca,
            cb,
            m_f,
            spread,
        })
    }

    pub fn kalman(model: &StateSpaceModel, weights: &WeightConfig) -> Result<Self> {
        let loss = LossParams::eps_only(DVector::zeros(model.m()))?;
        Self::new(FilterKind::Kalman, model, weights, &loss)
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    /// The innovation-to-theta matrix `M_f`.
    pub fn innovation_matrix(&self) -> &DMatrix<f64> {
        &self.m_f
    }

    /// `(A P^-1 A' + B Q^-1 B') C'`, mapping `theta` to the state increment.
    pub fn gain(&self) -> DMatrix<f64> {
        &self.spread * self.model.c().transpose()
    }

    /// Assembles the dual QP for one step.
    pub fn innovation_problem(
        &self,
        x_hat: &DVector<f64>,
        y_next: &DVector<f64>,
        constraint: &StepConstraint,
    ) -> Result<InnovationProblem> {
        let n = self.model.n();
        if x_hat.len() != n {
            return Err(Error::dim("filter state", n, x_hat.len()));
        }
        if y_next.len() != self.model.m() {
            return Err(Error::dim("measurement", self.model.m(), y_next.len()));
        }
        constraint.check_against(&self.model)?;
        let innovation = y_next - &self.ca * x_hat;
        let (m, p) = (self.model.m(), constraint.p());
        let mut quad = DMatrix::zeros(m + p, m + p);
        quad.view_mut((0, 0), (m, m)).copy_from(&self.m_f);
        let lin_xi = if p > 0 {
            let (t_tx, t_xx) = self.constraint_blocks(constraint);
            quad.view_mut((0, m), (m, p)).copy_from(&t_tx);
            quad.view_mut((m, 0), (p, m)).copy_from(&t_tx.transpose());
            quad.view_mut((m, m), (p, p)).copy_from(&t_xx);
            &constraint.a - &constraint.u * self.model.a() * x_hat
        } else {
            DVector::zeros(0)
        };
        InnovationProblem::new(quad, innovation, lin_xi, self.epsilon.clone(), self.kappa.clone())
    }

    /// Off-diagonal and multiplier blocks of the constrained quad matrix, from
    /// stacking `[CB; -(UB + V)]` against `Q^-1` and `[CA; -UA]` against `P^-1`.
    fn constraint_blocks(&self, constraint: &StepConstraint) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = (self.model.a(), self.model.b());
        let phi = -(&constraint.u * b + &constraint.v);
        let psi = -(&constraint.u * a);
        let t_tx = &self.cb * &self.q_inv * phi.transpose() + &self.ca * &self.p_inv * psi.transpose();
        let t_xx = &phi * &self.q_inv * phi.transpose() + &psi * &self.p_inv * psi.transpose();
        let t_xx = (&t_xx + t_xx.transpose()) * 0.5;
        (t_tx, t_xx)
    }

    /// Processes `y_next`. On failure the input state is untouched and the
    /// error names the rejected step.
    pub fn step(
        &self,
        state: &FilterState,
        y_next: &DVector<f64>,
        constraints: Option<&LinearConstraintSet>,
    ) -> Result<FilterState> {
        let step = state.step_index + 1;
        let empty;
        let constraint = match (self.kind.is_constrained(), constraints) {
            (true, Some(set)) => set.for_step(step),
            (false, Some(set)) if set.for_step(step).p() > 0 => {
                return Err(Error::Parameter(format!("{} does not accept constraints", self.kind)));
            }
            _ => {
                empty = StepConstraint::empty(self.model.n(), self.model.l());
                &empty
            }
        };
        let problem = self.innovation_problem(&state.x_hat, y_next, constraint)?;

        let (theta, xi, iterations) = if self.kind == FilterKind::Kalman {
            let theta = self
                .m_f
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("innovation matrix".into()))?
                .solve(problem.lin_theta());
            (theta, DVector::zeros(0), 0)
        } else {
            let solution = qp::solve(&problem, &self.options);
            if solution.status != SolveStatus::Converged {
                return Err(Error::StepRejected {
                    step,
                    status: solution.status,
                    kkt_residual: solution.kkt_residual,
                });
            }
            (solution.theta, solution.xi, solution.iterations)
        };

        let (a, c) = (self.model.a(), self.model.c());
        let lambda = c.transpose() * &theta - constraint.u.transpose() * &xi;
        let v_xi = constraint.v.transpose() * &xi;
        let x_next = a * &state.x_hat + &self.spread * &lambda - &self.b_q_inv * &v_xi;
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepRejected {
                step,
                status: SolveStatus::Unbounded,
                kkt_residual: f64::INFINITY,
            });
        }
        Ok(FilterState {
            last_posterior: &state.x_hat + &self.p_inv_at * &lambda,
            last_disturbance: &self.q_inv_bt * &lambda - &self.q_inv * &v_xi,
            x_hat: x_next,
            step_index: step,
            last_theta: theta,
            last_xi: xi,
            last_iterations: iterations,
        })
    }

    /// Runs over all measurements, stopping at the first rejected step.
    /// Returns the accepted states (one per processed measurement) and the error, if any.
    pub fn run_until_failure(
        &self,
        x0_bar: &DVector<f64>,
        measurements: &[DVector<f64>],
        constraints: Option<&LinearConstraintSet>,
    ) -> (Vec<FilterState>, Option<Error>) {
        let mut trajectory = Vec::with_capacity(measurements.len());
        let mut state = FilterState::initial(x0_bar.clone(), self.model.m(), self.model.l());
        for y in measurements {
            match self.step(&state, y, constraints) {
                Ok(next) => {
                    trajectory.push(next.clone());
                    state = next;
                }
                Err(err) => return (trajectory, Some(err)),
            }
        }
        (trajectory, None)
    }

    pub fn run(
        &self,
        x0_bar: &DVector<f64>,
        measurements: &[DVector<f64>],
        constraints: Option<&LinearConstraintSet>,
    ) -> Result<Vec<FilterState>> {
        if measurements.is_empty() {
            return Err(Error::Parameter("measurement sequence is empty".into()));
        }
        if x0_bar.len() != self.model.n() {
            return Err(Error::dim("initial estimate", self.model.n(), x0_bar.len()));
        }
        if let Some(set) = constraints {
            set.check_against(&self.model)?;
        }
        match self.run_until_failure(x0_bar, measurements, constraints) {
            (trajectory, None) => Ok(trajectory),
            (_, Some(err)) => Err(err),
        }
    }
}

pub fn step_eps_quadratic(
    state: &FilterState,
    y_next: &DVector<f64>,
    model: &StateSpaceModel,
    weights: &WeightConfig,
    loss: &LossParams,
) -> Result<FilterState> {
    Filter::new(FilterKind::EpsQuadratic, model, weights, loss)?.step(state, y_next, None)
}

pub fn step_eps_huber(
    state: &FilterState,
    y_next: &DVector<f64>,
    model: &StateSpaceModel,
    weights: &WeightConfig,
    loss: &LossParams,
) -> Result<FilterState> {
    Filter::new(FilterKind::EpsHuber, model, weights, loss)?.step(state, y_next, None)
}

pub fn step_constrained_eps(
    state: &FilterState,
    y_next: &DVector<f64>,
    model: &StateSpaceModel,
    weights: &WeightConfig,
    loss: &LossParams,
    constraints: &LinearConstraintSet,
) -> Result<FilterState> {
    Filter::new(FilterKind::ConstrainedEps, model, weights, loss)?.step(state, y_next, Some(constraints))
}

pub fn step_constrained_huber(
    state: &FilterState,
    y_next: &DVector<f64>,
    model: &StateSpaceModel,
    weights: &WeightConfig,
    loss: &LossParams,
    constraints: &LinearConstraintSet,
) -> Result<FilterState> {
    Filter::new(FilterKind::ConstrainedHuber, model, weights, loss)?.step(state, y_next, Some(constraints))
}

pub fn step_kalman(
    state: &FilterState,
    y_next: &DVector<f64>,
    model: &StateSpaceModel,
    weights: &WeightConfig,
) -> Result<FilterState> {
    Filter::kalman(model, weights)?.step(state, y_next, None)
}

pub fn run(
    kind: FilterKind,
    model: &StateSpaceModel,
    weights: &WeightConfig,
    loss: &LossParams,
    constraints: Option<&LinearConstraintSet>,
    x0_bar: &DVector<f64>,
    measurements: &[DVector<f64>],
) -> Result<Vec<FilterState>> {
    Filter::new(kind, model, weights, loss)?.run(x0_bar, measurements, constraints)
}

/// Suggests `P` for the Kalman analogy: the inverse of the steady-state
/// a-posteriori error covariance of the discrete Riccati recursion with noise
/// covariances `Q^-1` and `R^-1`. The filters themselves never update `P`.
pub fn steady_state_weight(model: &StateSpaceModel, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b, c) = (model.a(), model.b(), model.c());
    let process = b * spd_inverse(q, "weight Q")? * b.transpose();
    let noise = spd_inverse(r, "weight R")?;
    let n = model.n();
    let mut cov = DMatrix::identity(n, n);
    for _ in 0..100_000 {
        let pred = a * &cov * a.transpose() + &process;
        let s = c * &pred * c.transpose() + &noise;
        let s_inv = spd_inverse(&s, "innovation covariance")?;
        let next = &pred - &pred * c.transpose() * s_inv * c * &pred;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &cov).amax();
        cov = next;
        if change <= 1e-14 * cov.amax().max(1e-300) {
            return spd_inverse(&cov, "steady-state error covariance");
        }
    }
    Err(Error::Parameter("Riccati iteration did not converge".into()))
}
