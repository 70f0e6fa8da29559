//! System description shared by the filters, the batch smoother and the simulator.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `x_{k+1} = A x_k + B w_k`, `y_k = C x_k + v_k` with constant matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim("model A cols", n, a.ncols()));
        }
        if b.nrows() != n {
            return Err(Error::dim("model B rows", n, b.nrows()));
        }
        if c.ncols() != n {
            return Err(Error::dim("model C cols", n, c.ncols()));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Disturbance dimension.
    pub fn l(&self) -> usize {
        self.b.ncols()
    }

    /// Measurement dimension.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }
}

/// Positive-definite weights on the initial estimate error (`P`), the
/// disturbances (`Q`) and the measurement residuals (`R`). Their inverses play
/// the role of covariances in the Kalman correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl WeightConfig {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_spd(&p, "weight P")?;
        check_spd(&q, "weight Q")?;
        check_spd(&r, "weight R")?;
        Ok(Self { p, q, r })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub(crate) fn check_against(&self, model: &StateSpaceModel) -> Result<()> {
        if self.p.nrows() != model.n() {
            return Err(Error::dim("weight P", model.n(), self.p.nrows()));
        }
        if self.q.nrows() != model.l() {
            return Err(Error::dim("weight Q", model.l(), self.q.nrows()));
        }
        if self.r.nrows() != model.m() {
            return Err(Error::dim("weight R", model.m(), self.r.nrows()));
        }
        Ok(())
    }
}

fn check_spd(mat: &DMatrix<f64>, name: &str) -> Result<()> {
    if !mat.is_square() {
        return Err(Error::dim(format!("{name} cols"), mat.nrows(), mat.ncols()));
    }
    let scale = mat.amax().max(1.0);
    if (mat - mat.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite(name.to_string()));
    }
    if mat.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(name.to_string()));
    }
    Ok(())
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub(crate) fn spd_inverse(mat: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let inv = mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// One step's inequality `U x_{k+1} + V w_k <= a`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepConstraint {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl StepConstraint {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, a: DVector<f64>) -> Result<Self> {
        let p = a.len();
        if u.nrows() != p {
            return Err(Error::dim("constraint U rows", p, u.nrows()));
        }
        if v.nrows() != p {
            return Err(Error::dim("constraint V rows", p, v.nrows()));
        }
        Ok(Self { u, v, a })
    }

    /// No rows.
    pub fn empty(n: usize, l: usize) -> Self {
        Self {
            u: DMatrix::zeros(0, n),
            v: DMatrix::zeros(0, l),
            a: DVector::zeros(0),
        }
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub(crate) fn check_against(&self, model: &StateSpaceModel) -> Result<()> {
        if self.u.ncols() != model.n() {
            return Err(Error::dim("constraint U cols", model.n(), self.u.ncols()));
        }
        if self.v.ncols() != model.l() {
            return Err(Error::dim("constraint V cols", model.l(), self.v.ncols()));
        }
        Ok(())
    }

    /// Largest violation of `U x + V w <= a` (zero when satisfied).
    pub fn violation(&self, x: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let lhs = &self.u * x + &self.v * w;
        (lhs - &self.a).iter().fold(0.0_f64, |acc, &v| acc.max(v))
    }
}

/// Constraint schedule: a constant `(U, V, a)` with optional per-step overrides.
///
/// Step `k` refers to the constraint imposed while processing `y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraintSet {
    base: StepConstraint,
    overrides: BTreeMap<usize, StepConstraint>,
}

impl LinearConstraintSet {
    pub fn constant(u: DMatrix<f64>, v: DMatrix<f64>, a: DVector<f64>) -> Result<Self> {
        Ok(Self {
            base: StepConstraint::new(u, v, a)?,
            overrides: BTreeMap::new(),
        })
    }

    pub fn empty(n: usize, l: usize) -> Self {
        Self {
            base: StepConstraint::empty(n, l),
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, step: usize, constraint: StepConstraint) -> Self {
        self.overrides.insert(step, constraint);
        self
    }

    pub fn for_step(&self, step: usize) -> &StepConstraint {
        self.overrides.get(&step).unwrap_or(&self.base)
    }

    pub(crate) fn check_against(&self, model: &StateSpaceModel) -> Result<()> {
        self.base.check_against(model)?;
        self.overrides.values().try_for_each(|c| c.check_against(model))
    }
}
