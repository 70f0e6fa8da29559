//! Synthetic trajectories with biased, noisy and outlier-contaminated
//! measurements, and RMSE scoring of filter estimates.
//!
//! Random streams come from ChaCha8 seeded with `seed` (via
//! `SeedableRng::seed_from_u64`). Uniforms are the generator's standard
//! 53-bit `f64` in `[0, 1)`; normals use the Marsaglia polar method, caching
//! the second variate of each accepted pair. Per step `k = 0..N-1` the draws are
//! consumed in a fixed order regardless of which noise terms are zero:
//! `l` normals for `w_k`, `m` normals for the measurement noise, one uniform for
//! the outlier event and, only if it fires, `m` uniforms for the outlier signs.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::{Filter, FilterKind, FilterState};
use crate::losses::{self, Kappa, LossKind, LossParams};
use crate::model::{LinearConstraintSet, StateSpaceModel, WeightConfig};

const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub process_std: DVector<f64>,
    pub measurement_std: DVector<f64>,
    pub measurement_bias: DVector<f64>,
    pub outlier_probability: f64,
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(l: usize, m: usize) -> Self {
        Self {
            process_std: DVector::zeros(l),
            measurement_std: DVector::zeros(m),
            measurement_bias: DVector::zeros(m),
            outlier_probability: 0.0,
            outlier_magnitude: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &StateSpaceModel) -> Result<()> {
        if self.process_std.len() != model.l() {
            return Err(Error::dim("process_std", model.l(), self.process_std.len()));
        }
        if self.measurement_std.len() != model.m() {
            return Err(Error::dim("measurement_std", model.m(), self.measurement_std.len()));
        }
        if self.measurement_bias.len() != model.m() {
            return Err(Error::dim("measurement_bias", model.m(), self.measurement_bias.len()));
        }
        let stds = self.process_std.iter().chain(self.measurement_std.iter());
        if stds.clone().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("noise standard deviations must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_probability) {
            return Err(Error::Parameter(format!(
                "outlier probability must lie in [0, 1], got {}",
                self.outlier_probability
            )));
        }
        if !(self.outlier_magnitude.is_finite() && self.outlier_magnitude >= 0.0) {
            return Err(Error::Parameter("outlier magnitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// Seeded normal generator (Marsaglia polar method over ChaCha8).
#[derive(Debug, Clone)]
pub struct GaussianSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * factor);
                return u * factor;
            }
        }
    }
}

/// Simulated truth and measurements for steps `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    /// 1-based steps whose measurement carries an outlier.
    pub outlier_steps: Vec<usize>,
}

pub fn simulate(model: &StateSpaceModel, x0: &DVector<f64>, horizon: usize, noise: &NoiseSpec) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    if x0.len() != model.n() {
        return Err(Error::dim("initial state", model.n(), x0.len()));
    }
    noise.validate(model)?;
    let (l, m) = (model.l(), model.m());
    let mut source = GaussianSource::new(noise.seed);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(horizon);
    let mut measurements = Vec::with_capacity(horizon);
    let mut outlier_steps = Vec::new();

    for step in 1..=horizon {
        let w = DVector::from_fn(l, |i, _| noise.process_std[i] * source.normal());
        x = model.a() * &x + model.b() * w;
        let norm = x.norm();
        if norm.is_nan() || norm > DIVERGENCE_NORM {
            return Err(Error::SimulationDiverged { step, norm });
        }
        let v = DVector::from_fn(m, |j, _| noise.measurement_std[j] * source.normal());
        let mut y = model.c() * &x + &noise.measurement_bias + v;
        if source.uniform() < noise.outlier_probability {
            outlier_steps.push(step);
            for j in 0..m {
                let sign = if source.uniform() < 0.5 { -1.0 } else { 1.0 };
                y[j] += sign * noise.outlier_magnitude;
            }
        }
        states.push(x.clone());
        measurements.push(y);
    }
    Ok(Trajectory {
        states,
        measurements,
        outlier_steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rmse_per_state: DVector<f64>,
    pub outlier_steps: Vec<usize>,
    pub estimates: Vec<DVector<f64>>,
    /// Per-step measurement loss of the estimate, when computed.
    pub loss_trace: Vec<f64>,
}

impl RunReport {
    pub fn mean_rmse(&self) -> f64 {
        self.rmse_per_state.mean()
    }
}

pub fn score(truth: &[DVector<f64>], estimates: &[DVector<f64>]) -> Result<RunReport> {
    if truth.len() != estimates.len() {
        return Err(Error::dim("estimate count", truth.len(), estimates.len()));
    }
    if truth.is_empty() {
        return Err(Error::Parameter("cannot score an empty trajectory".into()));
    }
    let n = truth[0].len();
    let mut sum_sq = DVector::zeros(n);
    for (x, e) in truth.iter().zip(estimates) {
        if x.len() != n || e.len() != n {
            return Err(Error::dim(
                "state vector",
                n,
                if x.len() != n { x.len() } else { e.len() },
            ));
        }
        let diff = x - e;
        sum_sq += diff.component_mul(&diff);
    }
    Ok(RunReport {
        rmse_per_state: (sum_sq / truth.len() as f64).map(f64::sqrt),
        outlier_steps: Vec::new(),
        estimates: estimates.to_vec(),
        loss_trace: Vec::new(),
    })
}

/// Monte-Carlo comparison setup: each run `i` simulates with seed `noise.seed + i`.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: StateSpaceModel,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub noise: NoiseSpec,
    pub runs: usize,
}

#[derive(Debug, Clone)]
pub struct KindSummary {
    pub kind: FilterKind,
    pub reports: Vec<RunReport>,
}

impl KindSummary {
    /// RMSE per state averaged over runs.
    pub fn mean_rmse_per_state(&self) -> DVector<f64> {
        let n = self.reports[0].rmse_per_state.len();
        let total = self
            .reports
            .iter()
            .fold(DVector::zeros(n), |acc, r| acc + &r.rmse_per_state);
        total / self.reports.len() as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        self.mean_rmse_per_state().mean()
    }
}

/// Runs every filter kind on the same simulated trajectories.
///
/// Quadratic kinds use `loss` with the Huber cap removed, so one loss
/// configuration serves every kind.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    scenario: &Scenario,
    kinds: &[FilterKind],
    weights: &WeightConfig,
    loss: &LossParams,
    constraints: Option<&LinearConstraintSet>,
    x0_bar: &DVector<f64>,
) -> Result<Vec<KindSummary>> {
    if scenario.runs == 0 {
        return Err(Error::Parameter("at least one Monte-Carlo run is required".into()));
    }
    let filters = kinds
        .iter()
        .map(|&kind| match kind.loss_kind() {
            LossKind::Quadratic => {
                let uncapped = loss.clone().with_kappa(vec![Kappa::Infinite; loss.dim()])?;
                Filter::new(kind, &scenario.model, weights, &uncapped)
            }
            LossKind::Huber => Filter::new(kind, &scenario.model, weights, loss),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summaries: Vec<KindSummary> = kinds
        .iter()
        .map(|&kind| KindSummary {
            kind,
            reports: Vec::with_capacity(scenario.runs),
        })
        .collect();

    for run in 0..scenario.runs {
        let noise = NoiseSpec {
            seed: scenario.noise.seed.wrapping_add(run as u64),
            ..scenario.noise.clone()
        };
        let traj = simulate(&scenario.model, &scenario.x0, scenario.horizon, &noise)?;
        for (filter, summary) in filters.iter().zip(summaries.iter_mut()) {
            let cons = if filter.kind().is_constrained() {
                constraints
            } else {
                None
            };
            let states = filter.run(x0_bar, &traj.measurements, cons)?;
            let estimates: Vec<_> = states.iter().map(|s: &FilterState| s.x_hat.clone()).collect();
            let mut report = score(&traj.states, &estimates)?;
            report.outlier_steps = traj.outlier_steps.clone();
            report.loss_trace = traj
                .measurements
                .iter()
                .zip(&estimates)
                .map(|(y, x)| {
                    let residual = y - scenario.model.c() * x;
                    losses::eval_stacked_loss(&residual, loss, filter.kind().loss_kind())
                })
                .collect::<Result<_>>()?;
            summary.reports.push(report);
        }
    }
    Ok(summaries)
}
