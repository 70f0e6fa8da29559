use std::path::Path;

use nalgebra::DVector;
use robust_filter::batch::{self, BatchConstraints, BatchProblem, BatchVariant, SmoothOptions, DEFAULT_BATCH_CAP};
use robust_filter::sim::{self, Scenario};
use robust_filter::{Error, Filter, FilterKind, LossParams, SolveStatus};
use serde_json::json;

use crate::config::{RunConfig, SimulateSection};
use crate::csvio::{fmt, header, read_measurements, write_records, write_series};
use crate::error::CliError;

pub const BATCH_CAP_ENV: &str = "ROBUST_FILTER_BATCH_CAP";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values always serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn simulate_section(cfg: &RunConfig, seed: Option<u64>) -> Result<SimulateSection, CliError> {
    let mut section = cfg.simulate.clone().ok_or_else(|| CliError::Config {
        path: "simulate".into(),
        message: "missing section".into(),
    })?;
    if let Some(seed) = seed {
        section.noise.seed = seed;
    }
    Ok(section)
}

/// Kind/loss/constraint combinations the estimators would reject.
fn check_kind(cfg: &RunConfig) -> Result<(), CliError> {
    let quadratic = matches!(cfg.kind, FilterKind::EpsQuadratic | FilterKind::ConstrainedEps);
    if quadratic && !cfg.loss.all_kappa_infinite() {
        return Err(CliError::Config {
            path: "loss.kappa".into(),
            message: format!("filter kind {} needs an infinite kappa (omit the field)", cfg.kind),
        });
    }
    if !cfg.kind.is_constrained() && cfg.constraints.is_some() {
        return Err(CliError::Config {
            path: "constraints".into(),
            message: format!("filter kind {} does not accept constraints", cfg.kind),
        });
    }
    Ok(())
}

fn measurements(cfg: &RunConfig) -> Result<Vec<DVector<f64>>, CliError> {
    let path = cfg.measurements.as_ref().ok_or_else(|| CliError::Config {
        path: "data.measurements".into(),
        message: "missing field".into(),
    })?;
    if !path.is_file() {
        return Err(CliError::Config {
            path: "data.measurements".into(),
            message: format!("file not found: {}", path.display()),
        });
    }
    read_measurements(path, cfg.model.m())
}

/// Writes `measurements.csv` and `truth.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let section = simulate_section(cfg, seed)?;
    let traj = sim::simulate(&cfg.model, &section.x0, section.horizon, &section.noise)?;
    write_series(
        &out.join("measurements.csv"),
        &header("y", cfg.model.m()),
        &traj.measurements,
    )?;
    write_series(&out.join("truth.csv"), &header("x", cfg.model.n()), &traj.states)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "simulate",
            "horizon": section.horizon,
            "seed": section.noise.seed,
            "outlier_steps": traj.outlier_steps,
        }),
    )
}

fn status_name(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIter => "max_iter",
        SolveStatus::Unbounded => "unbounded",
    }
}

/// Writes `estimates.csv` and `diagnostics.csv`. A rejected step ends the run:
/// its diagnostics row carries the solver status and the command fails.
pub fn filter(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    check_kind(cfg)?;
    let ys = measurements(cfg)?;
    let loss = if cfg.kind == FilterKind::Kalman {
        LossParams::eps_only(DVector::zeros(cfg.model.m()))?
    } else {
        cfg.loss.clone()
    };
    let filter = Filter::new(cfg.kind, &cfg.model, &cfg.weights, &loss)?;
    let constraints = cfg.constraints.as_ref();
    let (states, failure) = filter.run_until_failure(&cfg.x0_bar, &ys, constraints);

    let (m, p) = (cfg.model.m(), constraints.map_or(0, |c| c.for_step(1).p()));
    let estimates: Vec<_> = states.iter().map(|s| s.x_hat.clone()).collect();
    write_series(&out.join("estimates.csv"), &header("xhat", cfg.model.n()), &estimates)?;

    let mut diag_header = header("theta", m);
    diag_header.extend((1..=p).map(|i| format!("xi_{i}")));
    diag_header.push("status".into());
    let mut rows: Vec<Vec<String>> = states
        .iter()
        .map(|s| {
            let mut row = vec![s.step_index.to_string()];
            row.extend(s.last_theta.iter().map(|&v| fmt(v)));
            row.extend(s.last_xi.iter().map(|&v| fmt(v)));
            row.push("converged".into());
            row
        })
        .collect();
    let iterations: usize = states.iter().map(|s| s.last_iterations).sum();
    let rejected = match &failure {
        Some(Error::StepRejected { step, status, .. }) => {
            let mut row = vec![step.to_string()];
            row.extend(std::iter::repeat_n(String::new(), m + p));
            row.push(status_name(*status).into());
            rows.push(row);
            Some((*step, status_name(*status)))
        }
        _ => None,
    };
    write_records(&out.join("diagnostics.csv"), &diag_header, &rows)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "filter",
            "kind": cfg.kind.name(),
            "steps": ys.len(),
            "accepted": states.len(),
            "total_iterations": iterations,
            "rejected_step": rejected.map(|(step, _)| step),
            "status": rejected.map_or("converged", |(_, s)| s),
        }),
    )?;
    match failure {
        Some(err) => Err(err.into()),
        None => Ok(()),
    }
}

/// Batch length cap: `ROBUST_FILTER_BATCH_CAP` if set, else the library default.
pub fn batch_cap() -> Result<usize, CliError> {
    match std::env::var(BATCH_CAP_ENV) {
        Err(_) => Ok(DEFAULT_BATCH_CAP),
        Ok(text) => match text.trim().parse::<usize>() {
            Ok(cap) if cap > 0 => Ok(cap),
            _ => Err(CliError::Usage(format!(
                "{BATCH_CAP_ENV} must be a positive integer, got `{text}`"
            ))),
        },
    }
}

/// Writes `smoothed.csv` (`x_1..x_N`); `x_0`, the objective and the duality
/// gap go to `summary.json`.
pub fn smooth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    check_kind(cfg)?;
    let ys = measurements(cfg)?;
    let (n, l) = (cfg.model.n(), cfg.model.l());
    let (variant, loss) = match cfg.kind {
        FilterKind::EpsQuadratic => (BatchVariant::EpsQuadratic, cfg.loss.clone()),
        FilterKind::EpsHuber => (BatchVariant::EpsHuber, cfg.loss.clone()),
        FilterKind::ConstrainedEps => (BatchVariant::ConstrainedEps, cfg.loss.clone()),
        FilterKind::ConstrainedHuber => (BatchVariant::ConstrainedHuber, cfg.loss.clone()),
        // zero tube: the least-squares smoother
        FilterKind::Kalman => (
            BatchVariant::EpsQuadratic,
            LossParams::eps_only(DVector::zeros(cfg.model.m()))?,
        ),
    };
    let problem = BatchProblem {
        constraints: cfg
            .constraints
            .as_ref()
            .map(|set| BatchConstraints::per_step(set, ys.len(), n, l)),
        model: cfg.model.clone(),
        weights: cfg.weights.clone(),
        loss,
        measurements: ys,
        x0_bar: cfg.x0_bar.clone(),
    };
    let options = SmoothOptions {
        cap: batch_cap()?,
        ..SmoothOptions::default()
    };
    let solution = batch::smooth_with(&problem, variant, &options)?;
    let gap = batch::duality_gap(&problem, &solution, variant)?;
    write_series(&out.join("smoothed.csv"), &header("xhat", n), &solution.x_hat[1..])?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "smooth",
            "kind": cfg.kind.name(),
            "horizon": problem.horizon(),
            "x0_hat": vec_json(&solution.x_hat[0]),
            "objective": solution.objective,
            "duality_gap": gap,
            "iterations": solution.iterations,
        }),
    )
}

fn default_kinds(cfg: &RunConfig) -> Vec<FilterKind> {
    FilterKind::ALL
        .into_iter()
        .filter(|k| cfg.constraints.is_some() || !k.is_constrained())
        .collect()
}

/// Monte-Carlo comparison: writes `comparison.csv` (kind × RMSE) and per-run
/// detail in `summary.json`.
pub fn compare(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let section = simulate_section(cfg, seed)?;
    if section.runs == 0 {
        return Err(CliError::Config {
            path: "simulate.runs".into(),
            message: "at least one run is required".into(),
        });
    }
    let kinds = cfg.compare_kinds.clone().unwrap_or_else(|| default_kinds(cfg));
    if kinds.iter().any(|k| k.is_constrained()) && cfg.constraints.is_none() {
        return Err(CliError::Config {
            path: "compare.kinds".into(),
            message: "constrained kinds need a [constraints] section".into(),
        });
    }
    let scenario = Scenario {
        model: cfg.model.clone(),
        x0: section.x0.clone(),
        horizon: section.horizon,
        noise: section.noise.clone(),
        runs: section.runs,
    };
    let table = sim::compare(
        &scenario,
        &kinds,
        &cfg.weights,
        &cfg.loss,
        cfg.constraints.as_ref(),
        &cfg.x0_bar,
    )?;

    let n = cfg.model.n();
    let mut csv_header = vec!["kind".to_string(), "mean_rmse".to_string()];
    csv_header.extend((1..=n).map(|i| format!("rmse_{i}")));
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|summary| {
            let mut row = vec![summary.kind.name().to_string(), fmt(summary.mean_rmse())];
            row.extend(summary.mean_rmse_per_state().iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    write_records(&out.join("comparison.csv"), &csv_header, &rows)?;

    let per_kind: Vec<_> = table
        .iter()
        .map(|summary| {
            json!({
                "kind": summary.kind.name(),
                "mean_rmse": summary.mean_rmse(),
                "run_mean_rmse": summary.reports.iter().map(|r| r.mean_rmse()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let outliers: Vec<usize> = table
        .first()
        .map(|s| s.reports.iter().map(|r| r.outlier_steps.len()).collect())
        .unwrap_or_default();
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "compare",
            "runs": section.runs,
            "horizon": section.horizon,
            "base_seed": section.noise.seed,
            "outliers_per_run": outliers,
            "kinds": per_kind,
        }),
    )
}
