//! Fixed-interval smoothers over a horizon of `N` measurements.
//!
//! The whole horizon is posed as one dense dual QP of size `N m (+ p)`, solved
//! with [`crate::qp`], and mapped back to states through the adjoint recursion
//!
//! ```text
//! lambda_N = 0,  lambda_{k-1} = A' lambda_k + C' theta_k - U_k' xi
//! x_0 = x0_bar + P^-1 A' lambda_0
//! w_k = Q^-1 B' lambda_k - Q^-1 V_k' xi,   x_{k+1} = A x_k + B w_k
//! ```
//!
//! The QP grows linearly with `N`, so this is meant for short horizons and as
//! a reference for the recursive filters (a one-step horizon reproduces them).
//! All costs carry a uniform factor of 1/2.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::{self, Kappa, LossKind, LossParams};
use crate::model::{spd_inverse, LinearConstraintSet, StateSpaceModel, WeightConfig};
use crate::qp::{self, InnovationProblem, SolveStatus, SolverOptions};

pub const DEFAULT_BATCH_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchVariant {
    /// Dead-zone quadratic loss.
    EpsQuadratic,
    /// Dead-zone Huber loss.
    EpsHuber,
    /// Dead-zone quadratic loss with linear inequality constraints.
    ConstrainedEps,
    /// Dead-zone Huber loss with linear inequality constraints.
    ConstrainedHuber,
}

impl BatchVariant {
    pub fn loss_kind(self) -> LossKind {
        match self {
            BatchVariant::EpsHuber | BatchVariant::ConstrainedHuber => LossKind::Huber,
            _ => LossKind::Quadratic,
        }
    }

    pub fn is_constrained(self) -> bool {
        matches!(self, BatchVariant::ConstrainedEps | BatchVariant::ConstrainedHuber)
    }
}

/// `sum_k U_k x_k + sum_k V_k w_k <= a` over the horizon.
///
/// `u[k - 1]` multiplies `x_k` (k = 1..N) and `v[k]` multiplies `w_k` (k = 0..N-1).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchConstraints {
    pub u: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub a: DVector<f64>,
}

impl BatchConstraints {
    /// Stacks a per-step schedule `U x_k + V w_{k-1} <= a` for k = 1..N into one
    /// block system.
    pub fn per_step(set: &LinearConstraintSet, horizon: usize, n: usize, l: usize) -> Self {
        let steps: Vec<_> = (1..=horizon).map(|k| set.for_step(k)).collect();
        let total: usize = steps.iter().map(|c| c.p()).sum();
        let mut u = vec![DMatrix::zeros(total, n); horizon];
        let mut v = vec![DMatrix::zeros(total, l); horizon];
        let mut a = DVector::zeros(total);
        let mut row = 0;
        for (k, c) in steps.iter().enumerate() {
            let p = c.p();
            u[k].view_mut((row, 0), (p, n)).copy_from(&c.u);
            v[k].view_mut((row, 0), (p, l)).copy_from(&c.v);
            a.rows_mut(row, p).copy_from(&c.a);
            row += p;
        }
        Self { u, v, a }
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchProblem {
    pub model: StateSpaceModel,
    pub weights: WeightConfig,
    pub loss: LossParams,
    /// `y_1 .. y_N`.
    pub measurements: Vec<DVector<f64>>,
    pub x0_bar: DVector<f64>,
    pub constraints: Option<BatchConstraints>,
}

impl BatchProblem {
    pub fn horizon(&self) -> usize {
        self.measurements.len()
    }

    fn validate(&self, variant: BatchVariant) -> Result<()> {
        let (n, l, m) = (self.model.n(), self.model.l(), self.model.m());
        let horizon = self.horizon();
        if horizon == 0 {
            return Err(Error::Parameter("batch horizon must be at least 1".into()));
        }
        self.weights.check_against(&self.model)?;
        if self.loss.dim() != m {
            return Err(Error::dim("loss channels", m, self.loss.dim()));
        }
        if self.x0_bar.len() != n {
            return Err(Error::dim("initial estimate", n, self.x0_bar.len()));
        }
        if let Some(y) = self.measurements.iter().find(|y| y.len() != m) {
            return Err(Error::dim("measurement", m, y.len()));
        }
        if variant.loss_kind() == LossKind::Quadratic && !self.loss.all_kappa_infinite() {
            return Err(Error::Parameter("quadratic variants require an infinite kappa".into()));
        }
        if let Some(c) = &self.constraints {
            let p = c.p();
            if c.u.len() != horizon {
                return Err(Error::dim("batch constraint U blocks", horizon, c.u.len()));
            }
            if c.v.len() != horizon {
                return Err(Error::dim("batch constraint V blocks", horizon, c.v.len()));
            }
            for u in &c.u {
                if u.shape() != (p, n) {
                    return Err(Error::dim("batch constraint U shape", p * n, u.nrows() * u.ncols()));
                }
            }
            for v in &c.v {
                if v.shape() != (p, l) {
                    return Err(Error::dim("batch constraint V shape", p * l, v.nrows() * v.ncols()));
                }
            }
        }
        Ok(())
    }

    fn active_constraints(&self, variant: BatchVariant) -> Option<&BatchConstraints> {
        if variant.is_constrained() {
            self.constraints.as_ref()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSolution {
    /// `x_0 .. x_N`.
    pub x_hat: Vec<DVector<f64>>,
    /// `w_0 .. w_{N-1}`.
    pub w_hat: Vec<DVector<f64>>,
    /// `theta_1 .. theta_N`.
    pub theta_hat: Vec<DVector<f64>>,
    pub xi_hat: DVector<f64>,
    /// `lambda_0 .. lambda_N`.
    pub lambda: Vec<DVector<f64>>,
    /// Dual objective value.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothOptions {
    pub cap: usize,
    pub solver: SolverOptions,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_BATCH_CAP,
            solver: SolverOptions::default(),
        }
    }
}

fn powers(a: &DMatrix<f64>, up_to: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(up_to + 1);
    out.push(DMatrix::identity(a.nrows(), a.ncols()));
    for k in 1..=up_to {
        out.push(a * &out[k - 1]);
    }
    out
}

/// Builds the horizon-wide dual QP.
///
/// With `Phi = [F; -(G' + V)]` and `Psi = [CA; ...; CA^N; -sum U_k A^k]` the
/// quad matrix is `Phi Q_inv Phi' + blockdiag(R_inv, 0) + Psi P^-1 Psi'`.
pub fn assemble(problem: &BatchProblem, variant: BatchVariant) -> Result<InnovationProblem> {
    problem.validate(variant)?;
    let model = &problem.model;
    let (a, b, c) = (model.a(), model.b(), model.c());
    let (n, l, m) = (model.n(), model.l(), model.m());
    let horizon = problem.horizon();
    let constraints = problem.active_constraints(variant);
    let p = constraints.map_or(0, |c| c.p());
    let rows = horizon * m + p;
    let a_pow = powers(a, horizon);

    let mut phi = DMatrix::zeros(rows, horizon * l);
    let mut psi = DMatrix::zeros(rows, n);
    for k in 1..=horizon {
        for j in 0..k {
            let block = c * &a_pow[k - 1 - j] * b;
            phi.view_mut(((k - 1) * m, j * l), (m, l)).copy_from(&block);
        }
        psi.view_mut(((k - 1) * m, 0), (m, n)).copy_from(&(c * &a_pow[k]));
    }
    let mut lin_xi = DVector::zeros(p);
    if let Some(cons) = constraints {
        for j in 0..horizon {
            let mut block = cons.v[j].clone();
            for k in (j + 1)..=horizon {
                block += &cons.u[k - 1] * &a_pow[k - 1 - j] * b;
            }
            phi.view_mut((horizon * m, j * l), (p, l)).copy_from(&(-block));
        }
        let mut drift = DMatrix::zeros(p, n);
        for (u, a_k) in cons.u.iter().zip(&a_pow[1..]) {
            drift += u * a_k;
        }
        psi.view_mut((horizon * m, 0), (p, n)).copy_from(&(-&drift));
        lin_xi = &cons.a - drift * &problem.x0_bar;
    }

    let q_inv = spd_inverse(problem.weights.q(), "weight Q")?;
    let p_inv = spd_inverse(problem.weights.p(), "weight P")?;
    let meas_inv = match variant.loss_kind() {
        LossKind::Quadratic => spd_inverse(problem.weights.r(), "weight R")?,
        LossKind::Huber => DMatrix::from_diagonal(&problem.loss.r().map(|r| 1.0 / r)),
    };
    let mut q_blocks = DMatrix::zeros(horizon * l, horizon * l);
    let mut meas_blocks = DMatrix::zeros(rows, rows);
    for k in 0..horizon {
        q_blocks.view_mut((k * l, k * l), (l, l)).copy_from(&q_inv);
        meas_blocks.view_mut((k * m, k * m), (m, m)).copy_from(&meas_inv);
    }
    let quad = &phi * q_blocks * phi.transpose() + meas_blocks + &psi * p_inv * psi.transpose();
    let quad = (&quad + quad.transpose()) * 0.5;

    let mut lin_theta = DVector::zeros(horizon * m);
    let mut epsilon = DVector::zeros(horizon * m);
    let mut kappa = Vec::with_capacity(horizon * m);
    for (k, (y, a_k)) in problem.measurements.iter().zip(&a_pow[1..]).enumerate() {
        let predicted = c * a_k * &problem.x0_bar;
        lin_theta.rows_mut(k * m, m).copy_from(&(y - predicted));
        epsilon.rows_mut(k * m, m).copy_from(problem.loss.epsilon());
        match variant.loss_kind() {
            LossKind::Quadratic => kappa.extend(std::iter::repeat_n(Kappa::Infinite, m)),
            LossKind::Huber => kappa.extend_from_slice(problem.loss.kappa()),
        }
    }
    InnovationProblem::new(quad, lin_theta, lin_xi, epsilon, kappa)
}

pub fn smooth(problem: &BatchProblem, variant: BatchVariant) -> Result<BatchSolution> {
    smooth_with(problem, variant, &SmoothOptions::default())
}

pub fn smooth_with(problem: &BatchProblem, variant: BatchVariant, options: &SmoothOptions) -> Result<BatchSolution> {
    if problem.horizon() > options.cap {
        return Err(Error::HorizonExceedsCap {
            horizon: problem.horizon(),
            cap: options.cap,
        });
    }
    let qp_problem = assemble(problem, variant)?;
    let solution = qp::solve(&qp_problem, &options.solver);
    if solution.status != SolveStatus::Converged {
        return Err(Error::BatchSolve(solution.status));
    }

    let model = &problem.model;
    let (a, b, c) = (model.a(), model.b(), model.c());
    let (n, m) = (model.n(), model.m());
    let horizon = problem.horizon();
    let q_inv = spd_inverse(problem.weights.q(), "weight Q")?;
    let p_inv = spd_inverse(problem.weights.p(), "weight P")?;
    let constraints = problem.active_constraints(variant);
    let xi = solution.xi.clone();

    let theta_hat: Vec<DVector<f64>> = (0..horizon)
        .map(|k| solution.theta.rows(k * m, m).clone_owned())
        .collect();
    let mut lambda = vec![DVector::zeros(n); horizon + 1];
    for k in (1..=horizon).rev() {
        let mut prev = a.transpose() * &lambda[k] + c.transpose() * &theta_hat[k - 1];
        if let Some(cons) = constraints {
            prev -= cons.u[k - 1].transpose() * &xi;
        }
        lambda[k - 1] = prev;
    }

    let mut x_hat = Vec::with_capacity(horizon + 1);
    x_hat.push(&problem.x0_bar + &p_inv * a.transpose() * &lambda[0]);
    let mut w_hat = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut w = &q_inv * b.transpose() * &lambda[k];
        if let Some(cons) = constraints {
            w -= &q_inv * cons.v[k].transpose() * &xi;
        }
        let next = a * &x_hat[k] + b * &w;
        x_hat.push(next);
        w_hat.push(w);
    }

    Ok(BatchSolution {
        x_hat,
        w_hat,
        theta_hat,
        xi_hat: xi,
        lambda,
        objective: solution.objective,
        iterations: solution.iterations,
    })
}

/// Primal cost of a trajectory: `1/2 |x_0 - x0_bar|_P^2 + 1/2 sum |w_k|_Q^2`
/// plus the measurement loss of the variant.
///
/// For the quadratic variants the loss of step `k` is
/// `min_{|eta| <= eps} 1/2 (e_k - eta)' R (e_k - eta)` with `e_k = y_k - C x_k`;
/// for the Huber variants it is the summed dead-zone Huber loss.
pub fn primal_objective(problem: &BatchProblem, solution: &BatchSolution, variant: BatchVariant) -> Result<f64> {
    problem.validate(variant)?;
    let horizon = problem.horizon();
    if solution.x_hat.len() != horizon + 1 {
        return Err(Error::dim("solution states", horizon + 1, solution.x_hat.len()));
    }
    if solution.w_hat.len() != horizon {
        return Err(Error::dim("solution disturbances", horizon, solution.w_hat.len()));
    }
    let (p, q) = (problem.weights.p(), problem.weights.q());
    let d0 = &solution.x_hat[0] - &problem.x0_bar;
    let mut cost = 0.5 * d0.dot(&(p * &d0));
    for w in &solution.w_hat {
        cost += 0.5 * w.dot(&(q * w));
    }
    let c = problem.model.c();
    for k in 1..=horizon {
        let residual = &problem.measurements[k - 1] - c * &solution.x_hat[k];
        cost += match variant.loss_kind() {
            LossKind::Huber => losses::eval_stacked_loss(&residual, &problem.loss, LossKind::Huber)?,
            LossKind::Quadratic => dead_zone_quadratic(&residual, problem.weights.r(), problem.loss.epsilon())?,
        };
    }
    Ok(cost)
}

/// `min_{|eta| <= eps} 1/2 (e - eta)' R (e - eta)`.
fn dead_zone_quadratic(residual: &DVector<f64>, r: &DMatrix<f64>, epsilon: &DVector<f64>) -> Result<f64> {
    let m = residual.len();
    let diagonal = (0..m).all(|i| (0..m).all(|j| i == j || r[(i, j)] == 0.0));
    if diagonal {
        return (0..m).try_fold(0.0, |acc, j| {
            Ok(acc + losses::eval_eps_quadratic(residual[j], r[(j, j)], epsilon[j])?)
        });
    }
    // box QP in eta: 1/2 eta' R eta - eta' R e, |eta_j| <= eps_j
    let re = r * residual;
    let box_problem = InnovationProblem::new(
        r.clone(),
        re.clone(),
        DVector::zeros(0),
        DVector::zeros(m),
        epsilon.iter().map(|&e| Kappa::Finite(e)).collect(),
    )?;
    let solution = qp::solve(&box_problem, &SolverOptions::default());
    if solution.status != SolveStatus::Converged {
        return Err(Error::BatchSolve(solution.status));
    }
    Ok(0.5 * residual.dot(&re) - solution.objective)
}

/// `primal - dual`; zero at an optimum.
pub fn duality_gap(problem: &BatchProblem, solution: &BatchSolution, variant: BatchVariant) -> Result<f64> {
    Ok(primal_objective(problem, solution, variant)? - solution.objective)
}

/// Largest violation of `x_{k+1} = A x_k + B w_k` along the trajectory.
pub fn dynamics_residual(model: &StateSpaceModel, solution: &BatchSolution) -> f64 {
    solution
        .w_hat
        .iter()
        .enumerate()
        .map(|(k, w)| (&solution.x_hat[k + 1] - model.a() * &solution.x_hat[k] - model.b() * w).amax())
        .fold(0.0, f64::max)
}

/// Largest violation of the horizon constraints (zero when none apply).
pub fn constraint_violation(problem: &BatchProblem, solution: &BatchSolution, variant: BatchVariant) -> f64 {
    let Some(cons) = problem.active_constraints(variant) else {
        return 0.0;
    };
    let mut lhs = DVector::zeros(cons.p());
    for k in 1..=problem.horizon() {
        lhs += &cons.u[k - 1] * &solution.x_hat[k];
        lhs += &cons.v[k - 1] * &solution.w_hat[k - 1];
    }
    (lhs - &cons.a).iter().fold(0.0, |acc: f64, &v| acc.max(v))
}
