//! Dead-zone loss functions.
//!
//! Both losses ignore residuals with `|z| <= epsilon`. Beyond the dead zone the
//! quadratic loss grows as `r/2 (|z| - epsilon)^2`; the Huber variant switches to
//! a linear penalty of slope `kappa` once `|z|` passes `epsilon + kappa / r`.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Per-channel Huber cap. `Infinite` disables the cap exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kappa {
    Finite(f64),
    Infinite,
}

impl Kappa {
    /// Maps `f64::INFINITY` to [`Kappa::Infinite`].
    pub fn from_f64(value: f64) -> Self {
        if value == f64::INFINITY {
            Kappa::Infinite
        } else {
            Kappa::Finite(value)
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Kappa::Infinite)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Kappa::Finite(k) => k,
            Kappa::Infinite => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Quadratic,
    Huber,
}

/// Per-channel loss parameters.
///
/// `r` holds the diagonal quadratic weights used by the Huber variants.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    epsilon: DVector<f64>,
    kappa: Vec<Kappa>,
    r: DVector<f64>,
}

impl LossParams {
    pub fn new(epsilon: DVector<f64>, kappa: Vec<Kappa>, r: DVector<f64>) -> Result<Self> {
        let m = epsilon.len();
        if kappa.len() != m {
            return Err(Error::dim("loss kappa", m, kappa.len()));
        }
        if r.len() != m {
            return Err(Error::dim("loss r", m, r.len()));
        }
        for j in 0..m {
            check_epsilon(epsilon[j])?;
            check_weight(r[j])?;
            check_kappa(kappa[j])?;
        }
        Ok(Self { epsilon, kappa, r })
    }

    /// Dead-zone widths only: unit weights, no Huber cap.
    pub fn eps_only(epsilon: DVector<f64>) -> Result<Self> {
        let m = epsilon.len();
        Self::new(epsilon, vec![Kappa::Infinite; m], DVector::from_element(m, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.epsilon.len()
    }

    pub fn epsilon(&self) -> &DVector<f64> {
        &self.epsilon
    }

    pub fn kappa(&self) -> &[Kappa] {
        &self.kappa
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn all_kappa_infinite(&self) -> bool {
        self.kappa.iter().all(|k| k.is_infinite())
    }

    /// Residual magnitude at which channel `j` turns linear.
    pub fn switch_point(&self, j: usize) -> f64 {
        self.epsilon[j] + self.kappa[j].as_f64() / self.r[j]
    }

    pub fn with_kappa(mut self, kappa: Vec<Kappa>) -> Result<Self> {
        if kappa.len() != self.dim() {
            return Err(Error::dim("loss kappa", self.dim(), kappa.len()));
        }
        for &k in &kappa {
            check_kappa(k)?;
        }
        self.kappa = kappa;
        Ok(self)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    // zero is admitted: it recovers the plain quadratic / Huber losses
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )))
    }
}

fn check_weight(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("r must be finite and > 0, got {r}")))
    }
}

fn check_kappa(kappa: Kappa) -> Result<()> {
    match kappa {
        Kappa::Infinite => Ok(()),
        Kappa::Finite(k) if k.is_finite() && k > 0.0 => Ok(()),
        Kappa::Finite(k) => Err(Error::Parameter(format!("kappa must be > 0, got {k}"))),
    }
}

pub fn eval_eps_quadratic(z: f64, r: f64, epsilon: f64) -> Result<f64> {
    check_weight(r)?;
    check_epsilon(epsilon)?;
    Ok(eps_quadratic(z.abs(), r, epsilon))
}

pub fn eval_eps_huber(z: f64, r: f64, epsilon: f64, kappa: Kappa) -> Result<f64> {
    check_weight(r)?;
    check_epsilon(epsilon)?;
    check_kappa(kappa)?;
    Ok(eps_huber(z.abs(), r, epsilon, kappa))
}

fn eps_quadratic(abs_z: f64, r: f64, epsilon: f64) -> f64 {
    if abs_z <= epsilon {
        0.0
    } else {
        let excess = abs_z - epsilon;
        0.5 * r * excess * excess
    }
}

fn eps_huber(abs_z: f64, r: f64, epsilon: f64, kappa: Kappa) -> f64 {
    let k = match kappa {
        Kappa::Infinite => return eps_quadratic(abs_z, r, epsilon),
        Kappa::Finite(k) => k,
    };
    let switch = epsilon + k / r;
    if abs_z < switch {
        eps_quadratic(abs_z, r, epsilon)
    } else {
        k * (abs_z - switch) + k * k / (2.0 * r)
    }
}

/// Sum of per-channel losses over a residual vector.
pub fn eval_stacked_loss(residuals: &DVector<f64>, params: &LossParams, kind: LossKind) -> Result<f64> {
    if residuals.len() != params.dim() {
        return Err(Error::dim("stacked loss residuals", params.dim(), residuals.len()));
    }
    let total = residuals
        .iter()
        .enumerate()
        .map(|(j, z)| {
            let (r, eps) = (params.r[j], params.epsilon[j]);
            match kind {
                LossKind::Quadratic => eps_quadratic(z.abs(), r, eps),
                LossKind::Huber => eps_huber(z.abs(), r, eps, params.kappa[j]),
            }
        })
        .sum();
    Ok(total)
}
