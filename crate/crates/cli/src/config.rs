//! Run configuration, read from TOML.
//!
//! Matrices are tables `{ rows, cols, data }` with `data` in row-major order.
//! Every error names the offending field path, e.g. `model.A.rows`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use robust_filter::sim::NoiseSpec;
use robust_filter::{FilterKind, Kappa, LinearConstraintSet, LossParams, StateSpaceModel, WeightConfig};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct SimulateSection {
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub noise: NoiseSpec,
    pub runs: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kind: FilterKind,
    pub model: StateSpaceModel,
    pub weights: WeightConfig,
    pub loss: LossParams,
    pub constraints: Option<LinearConstraintSet>,
    pub x0_bar: DVector<f64>,
    pub simulate: Option<SimulateSection>,
    pub compare_kinds: Option<Vec<FilterKind>>,
    /// Measurement CSV, resolved against the config file's directory. Its
    /// existence is checked by the commands that read it.
    pub measurements: Option<PathBuf>,
}

fn config_err(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

/// A table plus its dotted location in the document.
struct Node<'a> {
    path: String,
    table: &'a Table,
}

impl<'a> Node<'a> {
    fn field(&self, key: &str) -> Option<(String, &'a Value)> {
        self.table.get(key).map(|v| (join(&self.path, key), v))
    }

    fn required(&self, key: &str) -> Result<(String, &'a Value), CliError> {
        self.field(key)
            .ok_or_else(|| config_err(&join(&self.path, key), "missing field"))
    }

    fn section(&self, key: &str) -> Result<Option<Node<'a>>, CliError> {
        match self.field(key) {
            None => Ok(None),
            Some((path, Value::Table(table))) => Ok(Some(Node { path, table })),
            Some((path, _)) => Err(config_err(&path, "expected a table")),
        }
    }

    fn required_section(&self, key: &str) -> Result<Node<'a>, CliError> {
        self.section(key)?
            .ok_or_else(|| config_err(&join(&self.path, key), "missing section"))
    }
}

fn number(path: &str, value: &Value) -> Result<f64, CliError> {
    match value {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(config_err(path, "expected a number")),
    }
}

fn count(path: &str, value: &Value) -> Result<usize, CliError> {
    match value {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(config_err(path, "expected a non-negative integer")),
    }
}

fn seed(path: &str, value: &Value) -> Result<u64, CliError> {
    match value {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(config_err(path, "expected a non-negative integer seed")),
    }
}

fn string<'v>(path: &str, value: &'v Value) -> Result<&'v str, CliError> {
    value.as_str().ok_or_else(|| config_err(path, "expected a string"))
}

fn vector(path: &str, value: &Value) -> Result<DVector<f64>, CliError> {
    let Value::Array(items) = value else {
        return Err(config_err(path, "expected an array of numbers"));
    };
    let data = items
        .iter()
        .enumerate()
        .map(|(i, v)| number(&format!("{path}[{i}]"), v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(data))
}

fn vector_of_len(path: &str, value: &Value, len: usize) -> Result<DVector<f64>, CliError> {
    let v = vector(path, value)?;
    if v.len() != len {
        return Err(config_err(path, format!("expected {len} entries, found {}", v.len())));
    }
    Ok(v)
}

fn matrix(path: &str, value: &Value) -> Result<DMatrix<f64>, CliError> {
    let Value::Table(table) = value else {
        return Err(config_err(path, "expected a matrix table { rows, cols, data }"));
    };
    let node = Node {
        path: path.to_string(),
        table,
    };
    let (rows_path, rows) = node.required("rows")?;
    let rows = count(&rows_path, rows)?;
    let (cols_path, cols) = node.required("cols")?;
    let cols = count(&cols_path, cols)?;
    let (data_path, data) = node.required("data")?;
    let data = vector(&data_path, data)?;
    if data.len() != rows * cols {
        return Err(config_err(
            &data_path,
            format!("expected rows*cols = {} entries, found {}", rows * cols, data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data.as_slice()))
}

fn shaped(node: &Node, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, CliError> {
    let (path, value) = node.required(key)?;
    let mat = matrix(&path, value)?;
    if mat.shape() != (rows, cols) {
        return Err(config_err(
            &path,
            format!("expected a {rows}x{cols} matrix, found {}x{}", mat.nrows(), mat.ncols()),
        ));
    }
    Ok(mat)
}

fn core_err(path: &str, err: robust_filter::Error) -> CliError {
    config_err(path, err.to_string())
}

fn kind(path: &str, value: &Value) -> Result<FilterKind, CliError> {
    string(path, value)?
        .parse()
        .map_err(|e: robust_filter::Error| config_err(path, e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative file paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("", e.to_string()))?;
        let root = Node {
            path: String::new(),
            table: &table,
        };

        let model_node = root.required_section("model")?;
        let (a_path, a) = model_node.required("A")?;
        let a = matrix(&a_path, a)?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err(config_err(&a_path, "A must be square"));
        }
        let (b_path, b) = model_node.required("B")?;
        let b = matrix(&b_path, b)?;
        if b.nrows() != n {
            return Err(config_err(
                &format!("{b_path}.rows"),
                format!("expected {n} rows to match A"),
            ));
        }
        let l = b.ncols();
        let (c_path, c) = model_node.required("C")?;
        let c = matrix(&c_path, c)?;
        if c.ncols() != n {
            return Err(config_err(
                &format!("{c_path}.cols"),
                format!("expected {n} columns to match A"),
            ));
        }
        let m = c.nrows();
        let model = StateSpaceModel::new(a, b, c).map_err(|e| core_err("model", e))?;

        let loss_node = root.required_section("loss")?;
        let (eps_path, eps) = loss_node.required("epsilon")?;
        let epsilon = vector_of_len(&eps_path, eps, m)?;
        let kappa = match loss_node.field("kappa") {
            None => vec![Kappa::Infinite; m],
            Some((path, value)) => vector_of_len(&path, value, m)?
                .iter()
                .map(|&k| Kappa::from_f64(k))
                .collect(),
        };

        let weights_node = root.required_section("weights")?;
        let q = shaped(&weights_node, "Q", l, l)?;
        let r_mat = match weights_node.field("R") {
            Some(_) => Some(shaped(&weights_node, "R", m, m)?),
            None => None,
        };
        let r_diag = match weights_node.field("r") {
            Some((path, value)) => Some(vector_of_len(&path, value, m)?),
            None => None,
        };
        let (r_mat, r_diag) = match (r_mat, r_diag) {
            (Some(r), Some(d)) => (r, d),
            (Some(r), None) => {
                let d = r.diagonal();
                (r, d)
            }
            (None, Some(d)) => (DMatrix::from_diagonal(&d), d),
            (None, None) => return Err(config_err("weights.R", "missing field (give R or r)")),
        };
        let p = match weights_node.field("P") {
            Some(_) => shaped(&weights_node, "P", n, n)?,
            None => {
                robust_filter::filters::steady_state_weight(&model, &q, &r_mat).map_err(|e| core_err("weights.P", e))?
            }
        };
        let weights = WeightConfig::new(p, q, r_mat).map_err(|e| core_err("weights", e))?;
        let loss = LossParams::new(epsilon, kappa, r_diag).map_err(|e| core_err("loss", e))?;

        let constraints = match root.section("constraints")? {
            None => None,
            Some(node) => {
                let (u_path, u) = node.required("U")?;
                let u = matrix(&u_path, u)?;
                if u.ncols() != n {
                    return Err(config_err(&format!("{u_path}.cols"), format!("expected {n} columns")));
                }
                let pc = u.nrows();
                let v = match node.field("V") {
                    Some(_) => shaped(&node, "V", pc, l)?,
                    None => DMatrix::zeros(pc, l),
                };
                let (a_path, a) = node.required("a")?;
                let a = vector_of_len(&a_path, a, pc)?;
                Some(LinearConstraintSet::constant(u, v, a).map_err(|e| core_err("constraints", e))?)
            }
        };

        let kind = match root.field("kind") {
            Some((path, value)) => kind(&path, value)?,
            None => FilterKind::EpsQuadratic,
        };
        let x0_bar = match root.field("x0_bar") {
            Some((path, value)) => vector_of_len(&path, value, n)?,
            None => DVector::zeros(n),
        };

        let simulate = match root.section("simulate")? {
            None => None,
            Some(node) => Some(simulate_section(&node, n, l, m)?),
        };

        let compare_kinds = match root.section("compare")? {
            None => None,
            Some(node) => match node.field("kinds") {
                None => None,
                Some((path, Value::Array(items))) => Some(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| self::kind(&format!("{path}[{i}]"), v))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                Some((path, _)) => return Err(config_err(&path, "expected an array of filter kinds")),
            },
        };

        let measurements = match root.section("data")? {
            None => None,
            Some(node) => match node.field("measurements") {
                None => None,
                Some((path, value)) => Some(base.join(string(&path, value)?)),
            },
        };

        Ok(Self {
            kind,
            model,
            weights,
            loss,
            constraints,
            x0_bar,
            simulate,
            compare_kinds,
            measurements,
        })
    }
}

fn simulate_section(node: &Node, n: usize, l: usize, m: usize) -> Result<SimulateSection, CliError> {
    let (h_path, horizon) = node.required("horizon")?;
    let horizon = count(&h_path, horizon)?;
    if horizon == 0 {
        return Err(config_err(&h_path, "horizon must be at least 1"));
    }
    let optional_vec = |key: &str, len: usize| -> Result<DVector<f64>, CliError> {
        match node.field(key) {
            Some((path, value)) => vector_of_len(&path, value, len),
            None => Ok(DVector::zeros(len)),
        }
    };
    let optional_num = |key: &str| -> Result<f64, CliError> {
        match node.field(key) {
            Some((path, value)) => number(&path, value),
            None => Ok(0.0),
        }
    };
    let x0 = optional_vec("x0", n)?;
    let noise = NoiseSpec {
        process_std: optional_vec("process_std", l)?,
        measurement_std: optional_vec("measurement_std", m)?,
        measurement_bias: optional_vec("bias", m)?,
        outlier_probability: optional_num("outlier_probability")?,
        outlier_magnitude: optional_num("outlier_magnitude")?,
        seed: match node.field("seed") {
            Some((path, value)) => seed(&path, value)?,
            None => 0,
        },
    };
    let runs = match node.field("runs") {
        Some((path, value)) => count(&path, value)?,
        None => 1,
    };
    Ok(SimulateSection {
        x0,
        horizon,
        noise,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
kind = "eps-quadratic"
x0_bar = [0.0]

[model]
A = { rows = 1, cols = 1, data = [1.0] }
B = { rows = 1, cols = 1, data = [1.0] }
C = { rows = 1, cols = 1, data = [1.0] }

[weights]
P = { rows = 1, cols = 1, data = [1.0] }
Q = { rows = 1, cols = 1, data = [1.0] }
R = { rows = 1, cols = 1, data = [1.0] }

[loss]
epsilon = [1.0]
"#;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, Path::new("."))
    }

    fn error_path(text: &str) -> String {
        match parse(text) {
            Err(CliError::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_config_parses() {
        let cfg = parse(SCALAR).unwrap();
        assert_eq!(cfg.kind, FilterKind::EpsQuadratic);
        assert_eq!(cfg.model.n(), 1);
        assert!(cfg.loss.all_kappa_infinite());
        assert_eq!(cfg.loss.r()[0], 1.0);
        assert!(cfg.constraints.is_none());
    }

    #[test]
    fn missing_dims_name_the_field() {
        let text = SCALAR.replace("A = { rows = 1, cols = 1,", "A = { cols = 1,");
        assert_eq!(error_path(&text), "model.A.rows");
        let text = SCALAR.replace("data = [1.0] }\nB", "data = [1.0, 2.0] }\nB");
        assert_eq!(error_path(&text), "model.A.data");
    }

    #[test]
    fn loss_lengths_and_values_are_checked() {
        assert_eq!(
            error_path(&SCALAR.replace("epsilon = [1.0]", "epsilon = [1.0, 2.0]")),
            "loss.epsilon"
        );
        assert_eq!(
            error_path(&SCALAR.replace("epsilon = [1.0]", "epsilon = [\"a\"]")),
            "loss.epsilon[0]"
        );
        assert_eq!(
            error_path(&SCALAR.replace("epsilon = [1.0]", "epsilon = [-1.0]")),
            "loss"
        );
        assert_eq!(
            error_path(&SCALAR.replace("kind = \"eps-quadratic\"", "kind = \"magic\"")),
            "kind"
        );
    }

    #[test]
    fn kappa_accepts_inf_literal() {
        let text = SCALAR.replace("epsilon = [1.0]", "epsilon = [1.0]\nkappa = [inf]");
        assert!(parse(&text).unwrap().loss.all_kappa_infinite());
        let text = SCALAR.replace("epsilon = [1.0]", "epsilon = [1.0]\nkappa = [3]");
        assert_eq!(parse(&text).unwrap().loss.kappa()[0], Kappa::Finite(3.0));
    }

    #[test]
    fn omitted_p_uses_riccati_suggestion() {
        let text = SCALAR.replace("P = { rows = 1, cols = 1, data = [1.0] }\n", "");
        let cfg = parse(&text).unwrap();
        // scalar random walk with unit weights: P = 1 / ((sqrt(5) - 1) / 2)
        let expected = 2.0 / (5f64.sqrt() - 1.0);
        assert!((cfg.weights.p()[(0, 0)] - expected).abs() < 1e-9);
    }

    #[test]
    fn huber_weights_from_r_vector() {
        let text = SCALAR.replace("R = { rows = 1, cols = 1, data = [1.0] }", "r = [4.0]");
        let cfg = parse(&text).unwrap();
        assert_eq!(cfg.weights.r()[(0, 0)], 4.0);
        assert_eq!(cfg.loss.r()[0], 4.0);
        let text = SCALAR.replace("R = { rows = 1, cols = 1, data = [1.0] }\n", "");
        assert_eq!(error_path(&text), "weights.R");
    }

    #[test]
    fn measurement_path_resolves_against_config_dir() {
        let text = format!("{SCALAR}\n[data]\nmeasurements = \"y.csv\"\n");
        let cfg = RunConfig::parse(&text, Path::new("runs")).unwrap();
        assert_eq!(cfg.measurements.unwrap(), Path::new("runs").join("y.csv"));
    }

    #[test]
    fn constraints_default_v_to_zero() {
        let text = format!("{SCALAR}\n[constraints]\nU = {{ rows = 1, cols = 1, data = [1.0] }}\na = [0.0]\n");
        let cfg = parse(&text).unwrap();
        let set = cfg.constraints.unwrap();
        assert_eq!(set.for_step(1).v, DMatrix::zeros(1, 1));
    }
}
