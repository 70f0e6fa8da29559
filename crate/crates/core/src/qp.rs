//! Per-step dual quadratic programs.
//!
//! Every estimator in this crate reduces a measurement update to
//!
//! ```text
//! maximize   -1/2 z' H z - eps'|theta| + theta' c - xi' b
//! subject to |theta_j| <= kappa_j,  xi >= 0,         z = (theta, xi)
//! ```
//!
//! The absolute value replaces the usual slack `zeta >= +-theta` (at any optimum
//! `zeta = |theta|`). Internally the equivalent minimization is solved by cyclic
//! coordinate descent: soft-thresholding plus box clipping for `theta`, a
//! nonnegative Newton step for `xi`. Once the sign pattern settles, the free
//! coordinates are solved exactly on their face, which removes the slow tail of
//! coordinate descent on ill-conditioned instances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::Kappa;

/// Diagonal entries at or below this are treated as zero curvature.
const ZERO_CURVATURE: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-10;
/// Consecutive sweeps a recession direction must persist before reporting unbounded.
const RECESSION_CONFIRMATIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on the subgradient KKT residual.
    pub tol: f64,
    /// Maximum number of full coordinate sweeps.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnovationProblem {
    quad: DMatrix<f64>,
    lin_theta: DVector<f64>,
    lin_xi: DVector<f64>,
    epsilon: DVector<f64>,
    kappa: Vec<Kappa>,
}

impl InnovationProblem {
    /// Validates dimensions and definiteness, then symmetrizes `quad`.
    ///
    /// `epsilon` may contain zeros and finite `kappa` may be zero (which pins
    /// that coordinate at the origin).
    pub fn new(
        quad: DMatrix<f64>,
        lin_theta: DVector<f64>,
        lin_xi: DVector<f64>,
        epsilon: DVector<f64>,
        kappa: Vec<Kappa>,
    ) -> Result<Self> {
        let m = lin_theta.len();
        let p = lin_xi.len();
        let d = m + p;
        if quad.nrows() != d {
            return Err(Error::dim("innovation quad rows", d, quad.nrows()));
        }
        if quad.ncols() != d {
            return Err(Error::dim("innovation quad cols", d, quad.ncols()));
        }
        if epsilon.len() != m {
            return Err(Error::dim("innovation epsilon", m, epsilon.len()));
        }
        if kappa.len() != m {
            return Err(Error::dim("innovation kappa", m, kappa.len()));
        }
        if quad
            .iter()
            .chain(lin_theta.iter())
            .chain(lin_xi.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("innovation problem data must be finite".into()));
        }
        if epsilon.iter().any(|&e| !(e.is_finite() && e >= 0.0)) {
            return Err(Error::Parameter("innovation epsilon must be finite and >= 0".into()));
        }
        for k in &kappa {
            if let Kappa::Finite(v) = *k {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Parameter(format!("innovation kappa must be >= 0, got {v}")));
                }
            }
        }
        let scale = quad.amax().max(1.0);
        let asym = (&quad - quad.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Parameter(format!(
                "innovation quad is not symmetric (max deviation {asym:.3e})"
            )));
        }
        let quad = (&quad + quad.transpose()) * 0.5;
        if m > 0 && quad.view((0, 0), (m, m)).clone_owned().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("innovation quad theta block".into()));
        }
        Ok(Self {
            quad,
            lin_theta,
            lin_xi,
            epsilon,
            kappa,
        })
    }

    /// Number of `theta` (measurement) coordinates.
    pub fn m(&self) -> usize {
        self.lin_theta.len()
    }

    /// Number of `xi` (constraint multiplier) coordinates.
    pub fn p(&self) -> usize {
        self.lin_xi.len()
    }

    pub fn quad(&self) -> &DMatrix<f64> {
        &self.quad
    }

    pub fn lin_theta(&self) -> &DVector<f64> {
        &self.lin_theta
    }

    pub fn lin_xi(&self) -> &DVector<f64> {
        &self.lin_xi
    }

    pub fn epsilon(&self) -> &DVector<f64> {
        &self.epsilon
    }

    pub fn kappa(&self) -> &[Kappa] {
        &self.kappa
    }

    /// Concave (maximization-form) objective at `(theta, xi)`.
    pub fn dual_objective(&self, theta: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        let z = self.stack(theta, xi)?;
        Ok(-self.min_objective(&z))
    }

    fn stack(&self, theta: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.m() {
            return Err(Error::dim("candidate theta", self.m(), theta.len()));
        }
        if xi.len() != self.p() {
            return Err(Error::dim("candidate xi", self.p(), xi.len()));
        }
        let mut z = DVector::zeros(self.m() + self.p());
        z.rows_mut(0, self.m()).copy_from(theta);
        z.rows_mut(self.m(), self.p()).copy_from(xi);
        Ok(z)
    }

    fn min_objective(&self, z: &DVector<f64>) -> f64 {
        let m = self.m();
        let hz = &self.quad * z;
        let mut f = 0.5 * z.dot(&hz);
        for j in 0..m {
            f += self.epsilon[j] * z[j].abs() - self.lin_theta[j] * z[j];
        }
        for i in 0..self.p() {
            f += self.lin_xi[i] * z[m + i];
        }
        f
    }

    fn kappa_at(&self, j: usize) -> f64 {
        self.kappa[j].as_f64()
    }

    /// Gradient of the smooth part given `hz = H z`.
    fn grad(&self, i: usize, hz: &DVector<f64>) -> f64 {
        let m = self.m();
        if i < m {
            hz[i] - self.lin_theta[i]
        } else {
            hz[i] + self.lin_xi[i - m]
        }
    }

    fn kkt(&self, z: &DVector<f64>, hz: &DVector<f64>) -> f64 {
        let m = self.m();
        let mut worst: f64 = 0.0;
        for j in 0..m {
            let t = z[j];
            let k = self.kappa_at(j);
            let e = self.epsilon[j];
            let g = self.grad(j, hz);
            let v = if t.abs() > k {
                t.abs() - k
            } else if t == 0.0 {
                if k == 0.0 {
                    0.0
                } else {
                    (g.abs() - e).max(0.0)
                }
            } else if t >= k {
                (g + e).max(0.0)
            } else if t <= -k {
                (e - g).max(0.0)
            } else {
                (g + e * t.signum()).abs()
            };
            worst = worst.max(v);
        }
        for i in m..z.len() {
            let g = self.grad(i, hz);
            let v = if z[i] < 0.0 {
                -z[i]
            } else if z[i] > 0.0 {
                g.abs()
            } else {
                (-g).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    fn data_scale(&self) -> f64 {
        self.lin_theta
            .amax()
            .max(self.lin_xi.amax())
            .max(self.epsilon.amax())
            .max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnovationSolution {
    pub theta: DVector<f64>,
    /// Empty when the problem has no constraint block.
    pub xi: DVector<f64>,
    /// Value of the concave (maximization-form) objective.
    pub objective: f64,
    /// Coordinate sweeps performed.
    pub iterations: usize,
    pub status: SolveStatus,
    pub kkt_residual: f64,
}

impl InnovationSolution {
    /// Optimal value of the eliminated slack, `zeta = |theta|`.
    pub fn zeta(&self) -> DVector<f64> {
        self.theta.abs()
    }
}

/// Max-norm subgradient KKT violation of `candidate`.
pub fn kkt_residual(problem: &InnovationProblem, candidate: &InnovationSolution) -> Result<f64> {
    let z = problem.stack(&candidate.theta, &candidate.xi)?;
    let hz = problem.quad() * &z;
    Ok(problem.kkt(&z, &hz))
}

pub fn solve(problem: &InnovationProblem, options: &SolverOptions) -> InnovationSolution {
    Solver::new(problem, options, false).run().0
}

/// Like [`solve`], also returning the minimization-form objective after every
/// sweep and every face solve (index 0 is the starting point).
pub fn solve_traced(problem: &InnovationProblem, options: &SolverOptions) -> (InnovationSolution, Vec<f64>) {
    Solver::new(problem, options, true).run()
}

struct Solver<'a> {
    problem: &'a InnovationProblem,
    options: &'a SolverOptions,
    z: DVector<f64>,
    hz: DVector<f64>,
    trace: Option<Vec<f64>>,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a InnovationProblem, options: &'a SolverOptions, traced: bool) -> Self {
        let d = problem.m() + problem.p();
        Self {
            problem,
            options,
            z: DVector::zeros(d),
            hz: DVector::zeros(d),
            trace: traced.then(Vec::new),
        }
    }

    fn record(&mut self) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(self.problem.min_objective(&self.z));
        }
    }

    fn set(&mut self, i: usize, value: f64) {
        let delta = value - self.z[i];
        if delta != 0.0 {
            self.z[i] = value;
            self.hz.axpy(delta, &self.problem.quad.column(i), 1.0);
        }
    }

    fn effective_tol(&self) -> f64 {
        let scale = self.problem.data_scale().max(self.hz.amax());
        self.options.tol.max(1e3 * f64::EPSILON * scale)
    }

    fn run(mut self) -> (InnovationSolution, Vec<f64>) {
        self.record();
        let mut status = SolveStatus::MaxIter;
        let mut sweeps = 0;
        let mut recession_hits = 0;
        let mut last_pattern: Option<Vec<i8>> = None;

        if self.problem.kkt(&self.z, &self.hz) <= self.effective_tol() {
            status = SolveStatus::Converged;
        } else {
            while sweeps < self.options.max_iter {
                sweeps += 1;
                let before = self.z.clone();
                if !self.sweep() {
                    status = SolveStatus::Unbounded;
                    break;
                }
                self.record();

                let pattern = self.pattern();
                if last_pattern.as_ref() == Some(&pattern) && self.polish(&pattern) {
                    self.record();
                }
                last_pattern = Some(pattern);

                if self.problem.kkt(&self.z, &self.hz) <= self.effective_tol() {
                    status = SolveStatus::Converged;
                    break;
                }
                if self.is_recession_step(&before) {
                    recession_hits += 1;
                    if recession_hits >= RECESSION_CONFIRMATIONS {
                        status = SolveStatus::Unbounded;
                        break;
                    }
                } else {
                    recession_hits = 0;
                }
                if self.z.amax() > 1e15 * self.problem.data_scale() {
                    status = SolveStatus::Unbounded;
                    break;
                }
            }
        }
        self.finish(status, sweeps)
    }

    fn finish(self, status: SolveStatus, iterations: usize) -> (InnovationSolution, Vec<f64>) {
        let m = self.problem.m();
        let p = self.problem.p();
        let kkt_residual = self.problem.kkt(&self.z, &self.hz);
        let objective = -self.problem.min_objective(&self.z);
        let solution = InnovationSolution {
            theta: self.z.rows(0, m).clone_owned(),
            xi: self.z.rows(m, p).clone_owned(),
            objective,
            iterations,
            status,
            kkt_residual,
        };
        (solution, self.trace.unwrap_or_default())
    }

    /// One cyclic pass. Returns false on an unbounded zero-curvature coordinate.
    fn sweep(&mut self) -> bool {
        let m = self.problem.m();
        for i in 0..self.z.len() {
            let h = self.problem.quad[(i, i)];
            let g = self.problem.grad(i, &self.hz);
            let next = if i < m {
                let u = h * self.z[i] - g;
                let shrunk = soft_threshold(u, self.problem.epsilon[i]) / h;
                let k = self.problem.kappa_at(i);
                shrunk.clamp(-k, k)
            } else if h <= ZERO_CURVATURE {
                // linear in this coordinate: either pinned at zero or unbounded below
                let slope = g - h * self.z[i];
                if slope < 0.0 {
                    return false;
                }
                0.0
            } else {
                (self.z[i] - g / h).max(0.0)
            };
            self.set(i, next);
        }
        true
    }

    /// Sign pattern: -1/+1 free, 0 at origin, -2/+2 at the box.
    fn pattern(&self) -> Vec<i8> {
        let m = self.problem.m();
        (0..self.z.len())
            .map(|i| {
                let t = self.z[i];
                if t == 0.0 {
                    0
                } else if i < m && t.abs() >= self.problem.kappa_at(i) {
                    2 * t.signum() as i8
                } else {
                    t.signum() as i8
                }
            })
            .collect()
    }

    /// Minimizes exactly over the current face, stepping back to the first
    /// sign change or box hit. Returns true if the iterate moved.
    fn polish(&mut self, pattern: &[i8]) -> bool {
        let m = self.problem.m();
        let free: Vec<usize> = (0..pattern.len()).filter(|&i| pattern[i].abs() == 1).collect();
        if free.is_empty() {
            return false;
        }
        let q = &self.problem.quad;
        let nf = free.len();
        let mut h_ff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                h_ff[(a, b)] = q[(i, j)];
            }
            // H_FF z_F = -(linear part) - H_F,fixed z_fixed
            let linear = if i < m {
                -self.problem.lin_theta[i] + self.problem.epsilon[i] * f64::from(pattern[i])
            } else {
                self.problem.lin_xi[i - m]
            };
            let fixed: f64 = (0..pattern.len())
                .filter(|&j| pattern[j].abs() != 1)
                .map(|j| q[(i, j)] * self.z[j])
                .sum();
            rhs[a] = -linear - fixed;
        }
        let Some(chol) = h_ff.cholesky() else {
            return false;
        };
        let target = chol.solve(&rhs);

        // longest step toward the face minimizer that keeps the pattern
        let mut alpha: f64 = 1.0;
        let mut blocking: Option<(usize, f64)> = None;
        for (a, &i) in free.iter().enumerate() {
            let cur = self.z[i];
            let step = target[a] - cur;
            let sign = f64::from(pattern[i]);
            if step * sign < 0.0 {
                // moving toward zero
                let frac = -cur / step;
                if frac < alpha {
                    alpha = frac;
                    blocking = Some((i, 0.0));
                }
            }
            if i < m && step * sign > 0.0 {
                let k = self.problem.kappa_at(i);
                if k.is_finite() {
                    let frac = (sign * k - cur) / step;
                    if frac < alpha {
                        alpha = frac;
                        blocking = Some((i, sign * k));
                    }
                }
            }
        }
        let alpha = alpha.clamp(0.0, 1.0);
        if alpha == 0.0 {
            return false;
        }
        let before = self.problem.min_objective(&self.z);
        let saved = (self.z.clone(), self.hz.clone());
        for (a, &i) in free.iter().enumerate() {
            let value = match blocking {
                Some((b, v)) if b == i => v,
                _ => self.z[i] + alpha * (target[a] - self.z[i]),
            };
            self.set(i, value);
        }
        // the step can cross a bound by rounding
        for &i in &free {
            let clipped = if i < m {
                let k = self.problem.kappa_at(i);
                let v = self.z[i].clamp(-k, k);
                if v * f64::from(pattern[i]) < 0.0 {
                    0.0
                } else {
                    v
                }
            } else {
                self.z[i].max(0.0)
            };
            self.set(i, clipped);
        }
        if self.problem.min_objective(&self.z) > before {
            self.z = saved.0;
            self.hz = saved.1;
            return false;
        }
        true
    }

    /// Detects a persistent direction of unbounded descent: the last step lies in
    /// the null space of `H`, keeps `xi >= 0`, leaves capped `theta` fixed and has
    /// a strictly negative linear slope.
    fn is_recession_step(&self, before: &DVector<f64>) -> bool {
        let m = self.problem.m();
        let delta = &self.z - before;
        let norm = delta.amax();
        if norm == 0.0 {
            return false;
        }
        let d = delta / norm;
        if (m..d.len()).any(|i| d[i] < -1e-9) {
            return false;
        }
        if (0..m).any(|j| self.problem.kappa[j] != Kappa::Infinite && d[j].abs() > 1e-9) {
            return false;
        }
        let hd = &self.problem.quad * &d;
        if hd.amax() > 1e-7 * self.problem.quad.amax().max(1.0) {
            return false;
        }
        let mut slope = 0.0;
        for j in 0..m {
            slope += self.problem.epsilon[j] * d[j].abs() - self.problem.lin_theta[j] * d[j];
        }
        for i in m..d.len() {
            slope += self.problem.lin_xi[i - m] * d[i];
        }
        slope < -1e-7 * self.problem.data_scale()
    }
}

fn soft_threshold(u: f64, threshold: f64) -> f64 {
    if u > threshold {
        u - threshold
    } else if u < -threshold {
        u + threshold
    } else {
        0.0
    }
}
