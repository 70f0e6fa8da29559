//! Random instance generators and independent oracles shared by the
//! integration and acceptance tests. Nothing here calls the solver.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_filter::{InnovationProblem, Kappa, LossParams, StateSpaceModel, StepConstraint, WeightConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-half_width..half_width))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, half_width: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-half_width..half_width))
}

/// Frobenius-normalized, so the spectral radius is below `radius`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let g = uniform_matrix(rng, n, n, 1.0);
    let norm = g.norm().max(1e-3);
    g * (radius / norm)
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = uniform_matrix(rng, n, n, 1.0);
    &l * l.transpose() + DMatrix::identity(n, n) * 0.5
}

pub struct Instance {
    pub model: StateSpaceModel,
    pub weights: WeightConfig,
    pub x_hat: DVector<f64>,
    pub y: DVector<f64>,
}

/// Random dimensions in `1..=max_dim` each.
pub fn random_instance(rng: &mut ChaCha8Rng, max_dim: usize) -> Instance {
    let n = rng.random_range(1..=max_dim);
    let l = rng.random_range(1..=max_dim);
    let m = rng.random_range(1..=max_dim);
    instance_with_dims(rng, n, l, m)
}

pub fn instance_with_dims(rng: &mut ChaCha8Rng, n: usize, l: usize, m: usize) -> Instance {
    let model = StateSpaceModel::new(
        stable_matrix(rng, n, 0.95),
        uniform_matrix(rng, n, l, 1.0),
        uniform_matrix(rng, m, n, 1.0),
    )
    .unwrap();
    let weights = WeightConfig::new(spd(rng, n), spd(rng, l), spd(rng, m)).unwrap();
    Instance {
        model,
        weights,
        x_hat: uniform_vector(rng, n, 2.0),
        y: uniform_vector(rng, m, 3.0),
    }
}

pub fn random_loss(rng: &mut ChaCha8Rng, m: usize, finite_kappa: bool) -> LossParams {
    let eps = DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
    let r = DVector::from_fn(m, |_, _| rng.random_range(0.5..2.0));
    let kappa = (0..m)
        .map(|_| {
            if finite_kappa {
                Kappa::Finite(rng.random_range(0.1..1.5))
            } else {
                Kappa::Infinite
            }
        })
        .collect();
    LossParams::new(eps, kappa, r).unwrap()
}

/// Random constraint rows through a point near the prediction so that some bind.
pub fn random_constraint(rng: &mut ChaCha8Rng, n: usize, l: usize, p: usize) -> StepConstraint {
    let u = uniform_matrix(rng, p, n, 1.0);
    let v = uniform_matrix(rng, p, l, 0.5);
    let a = uniform_vector(rng, p, 1.0);
    StepConstraint::new(u, v, a).unwrap()
}

fn min_form_objective(p: &InnovationProblem, z: &DVector<f64>) -> f64 {
    let m = p.m();
    let mut f = 0.5 * z.dot(&(p.quad() * z));
    for j in 0..m {
        f += p.epsilon()[j] * z[j].abs() - p.lin_theta()[j] * z[j];
    }
    for i in 0..p.p() {
        f += p.lin_xi()[i] * z[m + i];
    }
    f
}

/// Exact minimizer by enumerating every face of the feasible set: each
/// `theta_j` is zero, free with a fixed sign, or at `+-kappa_j`; each `xi_i` is
/// zero or free. The face stationary point is kept when it lies in the closed
/// face. Returns `(z, min-form objective)`.
pub fn enumeration_oracle(p: &InnovationProblem) -> (DVector<f64>, f64) {
    let (m, pc) = (p.m(), p.p());
    let d = m + pc;
    let theta_states: Vec<usize> = (0..m).map(|j| if p.kappa()[j].is_infinite() { 3 } else { 5 }).collect();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut counter = vec![0usize; d];
    loop {
        if let Some(z) = face_point(p, &counter) {
            let f = min_form_objective(p, &z);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((z, f));
            }
        }
        // odometer over patterns
        let mut i = 0;
        loop {
            if i == d {
                return best.expect("origin face is always feasible");
            }
            counter[i] += 1;
            let limit = if i < m { theta_states[i] } else { 2 };
            if counter[i] < limit {
                break;
            }
            counter[i] = 0;
            i += 1;
        }
    }
}

// theta codes: 0 zero, 1 free+, 2 free-, 3 +kappa, 4 -kappa; xi codes: 0 zero, 1 free
fn face_point(p: &InnovationProblem, pattern: &[usize]) -> Option<DVector<f64>> {
    let m = p.m();
    let d = pattern.len();
    let mut z = DVector::zeros(d);
    let mut free = Vec::new();
    for i in 0..d {
        match (i < m, pattern[i]) {
            (_, 0) => {}
            (true, 3) => z[i] = p.kappa()[i].as_f64(),
            (true, 4) => z[i] = -p.kappa()[i].as_f64(),
            _ => free.push(i),
        }
    }
    if !free.is_empty() {
        let nf = free.len();
        let h = p.quad();
        let mut h_ff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                h_ff[(a, b)] = h[(i, j)];
            }
            let linear = if i < m {
                let sign = if pattern[i] == 1 { 1.0 } else { -1.0 };
                -p.lin_theta()[i] + p.epsilon()[i] * sign
            } else {
                p.lin_xi()[i - m]
            };
            let fixed: f64 = (0..d).filter(|j| !free.contains(j)).map(|j| h[(i, j)] * z[j]).sum();
            rhs[a] = -linear - fixed;
        }
        let lu = h_ff.lu();
        let sol = lu.solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for (a, &i) in free.iter().enumerate() {
            z[i] = sol[a];
        }
    }
    for i in 0..d {
        if i < m {
            let k = p.kappa()[i].as_f64();
            if z[i].abs() > k + 1e-12 {
                return None;
            }
            match pattern[i] {
                1 if z[i] < -1e-12 => return None,
                2 if z[i] > 1e-12 => return None,
                _ => {}
            }
        } else if z[i] < -1e-12 {
            return None;
        }
    }
    Some(z)
}

/// Three-case closed form for a scalar step (n = l = m = 1).
#[allow(clippy::too_many_arguments)]
pub fn scalar_closed_form(a: f64, b: f64, c: f64, p: f64, q: f64, r: f64, eps: f64, x: f64, y: f64) -> f64 {
    let m_f = c * b * b * c / q + 1.0 / r + c * a * a * c / p;
    let innovation = y - c * a * x;
    let theta = if innovation.abs() <= eps {
        0.0
    } else if innovation > 0.0 {
        (innovation - eps) / m_f
    } else {
        (innovation + eps) / m_f
    };
    a * x + (a * a / p + b * b / q) * c * theta
}

/// Unconstrained least-squares solution of the horizon problem with no dead
/// zone: returns `x_0 .. x_N`.
pub fn primal_least_squares(
    model: &StateSpaceModel,
    weights: &WeightConfig,
    x0_bar: &DVector<f64>,
    measurements: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let (n, l) = (model.n(), model.l());
    let horizon = measurements.len();
    let dim = n + horizon * l;
    // state_map[k] maps (x0, w_0..w_{N-1}) to x_k
    let mut state_map = vec![DMatrix::zeros(n, dim)];
    state_map[0]
        .view_mut((0, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    for k in 0..horizon {
        let mut next = model.a() * &state_map[k];
        let mut b_block = next.view_mut((0, n + k * l), (n, l));
        b_block += model.b();
        state_map.push(next);
    }
    let mut normal = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    normal.view_mut((0, 0), (n, n)).copy_from(weights.p());
    rhs.rows_mut(0, n).copy_from(&(weights.p() * x0_bar));
    for k in 0..horizon {
        normal.view_mut((n + k * l, n + k * l), (l, l)).copy_from(weights.q());
    }
    for k in 1..=horizon {
        let obs = model.c() * &state_map[k];
        normal += obs.transpose() * weights.r() * &obs;
        rhs += obs.transpose() * weights.r() * &measurements[k - 1];
    }
    let z = normal.cholesky().unwrap().solve(&rhs);
    state_map.iter().map(|s| s * &z).collect()
}

/// One-step primal solve of the dead-zone quadratic problem with optional
/// constraint, by enumerating active sets of its KKT system.
///
/// Variables `(d, w, eta)` with posterior `x_hat + d`; returns
/// `(x_next, posterior, w)`.
pub fn primal_step_oracle(
    model: &StateSpaceModel,
    weights: &WeightConfig,
    eps: &DVector<f64>,
    x_hat: &DVector<f64>,
    y: &DVector<f64>,
    constraint: &StepConstraint,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (n, l, m) = (model.n(), model.l(), model.m());
    let pc = constraint.p();
    let dim = n + l + m;
    let (a, b, c) = (model.a(), model.b(), model.c());
    let e = y - c * a * x_hat;
    // residual = e - J u with J = [CA, CB, I]
    let mut j = DMatrix::zeros(m, dim);
    j.view_mut((0, 0), (m, n)).copy_from(&(c * a));
    j.view_mut((0, n), (m, l)).copy_from(&(c * b));
    j.view_mut((0, n + l), (m, m)).copy_from(&DMatrix::identity(m, m));
    let mut hess = j.transpose() * weights.r() * &j;
    {
        let mut blk = hess.view_mut((0, 0), (n, n));
        blk += weights.p();
    }
    {
        let mut blk = hess.view_mut((n, n), (l, l));
        blk += weights.q();
    }
    let grad0 = -(j.transpose() * weights.r() * &e);

    // inequality rows G u <= h
    let rows = 2 * m + pc;
    let mut g = DMatrix::zeros(rows, dim);
    let mut h = DVector::zeros(rows);
    for i in 0..m {
        g[(2 * i, n + l + i)] = 1.0;
        g[(2 * i + 1, n + l + i)] = -1.0;
        h[2 * i] = eps[i];
        h[2 * i + 1] = eps[i];
    }
    if pc > 0 {
        g.view_mut((2 * m, 0), (pc, n)).copy_from(&(&constraint.u * a));
        g.view_mut((2 * m, n), (pc, l))
            .copy_from(&(&constraint.u * b + &constraint.v));
        h.rows_mut(2 * m, pc)
            .copy_from(&(&constraint.a - &constraint.u * a * x_hat));
    }

    let total = 3usize.pow(m as u32) * 2usize.pow(pc as u32);
    for code in 0..total {
        let mut active = Vec::new();
        let mut rest = code;
        for i in 0..m {
            match rest % 3 {
                1 => active.push(2 * i),
                2 => active.push(2 * i + 1),
                _ => {}
            }
            rest /= 3;
        }
        for i in 0..pc {
            if rest % 2 == 1 {
                active.push(2 * m + i);
            }
            rest /= 2;
        }
        let na = active.len();
        let mut kkt = DMatrix::zeros(dim + na, dim + na);
        let mut rhs = DVector::zeros(dim + na);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&hess);
        rhs.rows_mut(0, dim).copy_from(&(-&grad0));
        for (k, &row) in active.iter().enumerate() {
            for col in 0..dim {
                kkt[(dim + k, col)] = g[(row, col)];
                kkt[(col, dim + k)] = g[(row, col)];
            }
            rhs[dim + k] = h[row];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let u = sol.rows(0, dim).clone_owned();
        let mult = sol.rows(dim, na);
        let feasible = (&g * &u - &h).iter().all(|&v| v <= 1e-9);
        let dual_ok = mult.iter().all(|&v| v >= -1e-9);
        if feasible && dual_ok {
            let d = u.rows(0, n).clone_owned();
            let w = u.rows(n, l).clone_owned();
            let posterior = x_hat + &d;
            let x_next = a * &posterior + b * &w;
            return (x_next, posterior, w);
        }
    }
    panic!("no KKT point found");
}
