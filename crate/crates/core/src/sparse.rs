//! Dictionary learning with an L1 penalty: alternating ISTA coefficient
//! updates and ridge-regularized least-squares dictionary updates.
//!
//! Plain (non-accelerated) ISTA is used on purpose: its objective is
//! monotone, which the tests assert step by step.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Dictionary of `m` flattened atoms, one per row, each of unit Frobenius
/// norm after a dictionary update.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub atoms: Tensor, // (m, d)
}

impl Dictionary {
    pub fn new(atoms: Tensor) -> Result<Self> {
        if atoms.rank() != 2 {
            return Err(Error::ShapeMismatch("dictionary must be rank 2".into()));
        }
        Ok(Dictionary { atoms })
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn atom_dim(&self) -> usize {
        self.atoms.shape()[1]
    }
}

/// Coefficient matrix: one row of `m` coefficients per coded filter.
#[derive(Debug, Clone)]
pub struct CoefficientMatrix {
    pub values: Tensor, // (n, m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseCodingConfig {
    /// L1 weight.
    pub lambda: f32,
    /// Maximum alternating rounds.
    pub max_outer: usize,
    /// Maximum ISTA iterations per coefficient solve.
    pub max_ista: usize,
    /// Relative objective-change convergence threshold.
    pub tol: f64,
    /// Ridge added to the normal matrix of the dictionary update.
    pub ridge: f64,
    /// Seed for the dictionary initialization.
    pub seed: u64,
}

impl Default for SparseCodingConfig {
    fn default() -> Self {
        SparseCodingConfig {
            lambda: 0.01,
            max_outer: 50,
            max_ista: 100,
            tol: 1e-6,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl SparseCodingConfig {
    /// Default lambda scaled to the data: 0.01 * mean |target|.
    pub fn scaled_to(target: &Tensor, seed: u64) -> Self {
        let mean_abs =
            target.data().iter().map(|v| v.abs() as f64).sum::<f64>() / target.len() as f64;
        SparseCodingConfig {
            lambda: (0.01 * mean_abs) as f32,
            seed,
            ..Default::default()
        }
    }
}

/// Solver trace, serialized alongside decomposition outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub objective_per_round: Vec<f64>,
    pub final_relative_error: f64,
    pub lambda: f32,
    pub m: usize,
    pub outer_rounds: usize,
    pub ista_iterations: usize,
    pub seed: u64,
    pub converged: bool,
}

/// Proximal map of tau*|.|: sign(x) * max(|x| - tau, 0).
pub fn soft_threshold(x: f32, tau: f32) -> f32 {
    debug_assert!(tau >= 0.0);
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// 0.5*||target - alpha*D||_F^2 + lambda*||alpha||_1, in f64.
pub fn objective(target: &Tensor, coeffs: &CoefficientMatrix, dict: &Dictionary, lambda: f32) -> f64 {
    let (n, m) = (coeffs.values.shape()[0], coeffs.values.shape()[1]);
    let d = dict.atom_dim();
    let recon = matmul(coeffs.values.data(), dict.atoms.data(), n, m, d);
    let mut quad = 0.0f64;
    for (r, t) in recon.iter().zip(target.data()) {
        let diff = (*r as f64) - (*t as f64);
        quad += diff * diff;
    }
    let l1: f64 = coeffs
        .values
        .data()
        .iter()
        .map(|v| v.abs() as f64)
        .sum::<f64>();
    0.5 * quad + lambda as f64 * l1
}

/// Largest eigenvalue of D*D^T by power iteration (50 steps, tol 1e-6).
pub fn lipschitz(dict: &Dictionary) -> Result<f64> {
    let m = dict.num_atoms();
    let d = dict.atom_dim();
    let atoms = dict.atoms.data();
    // gram[i][j] = <d_i, d_j>
    let mut gram = vec![0.0f64; m * m];
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0f64;
            for p in 0..d {
                acc += atoms[i * d + p] as f64 * atoms[j * d + p] as f64;
            }
            gram[i * m + j] = acc;
            gram[j * m + i] = acc;
        }
    }
    // generic start vector: a uniform start can be exactly orthogonal to the
    // top eigenvector (e.g. a 2x2 gram with negative off-diagonal), which
    // silently converges to a smaller eigenvalue
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
    for x in &mut v {
        *x /= vn;
    }
    let mut eig = 0.0f64;
    for _ in 0..50 {
        let mut w = vec![0.0f64; m];
        for i in 0..m {
            for j in 0..m {
                w[i] += gram[i * m + j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-30 {
            return Err(Error::ZeroDictionary);
        }
        let new_eig = norm;
        for x in &mut w {
            *x /= norm;
        }
        v = w;
        if (new_eig - eig).abs() <= 1e-6 * new_eig.max(1.0) {
            eig = new_eig;
            break;
        }
        eig = new_eig;
    }
    if eig < 1e-30 {
        return Err(Error::ZeroDictionary);
    }
    Ok(eig)
}

/// ISTA solve of the coefficient subproblem with the dictionary fixed.
pub fn ista_coefficients(
    target: &Tensor,
    dict: &Dictionary,
    cfg: &SparseCodingConfig,
) -> Result<CoefficientMatrix> {
    ista_coefficients_traced(target, dict, cfg).map(|(c, _)| c)
}

/// Like [`ista_coefficients`] but also returns the iterations used.
pub fn ista_coefficients_traced(
    target: &Tensor,
    dict: &Dictionary,
    cfg: &SparseCodingConfig,
) -> Result<(CoefficientMatrix, usize)> {
    let n = target.shape()[0];
    let d = target.shape()[1];
    let m = dict.num_atoms();
    if dict.atom_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "dictionary atoms have {} columns, target has {d}",
            dict.atom_dim()
        )));
    }
    let lip = lipschitz(dict)?;
    let t = 1.0 / lip;
    let tau = (t * cfg.lambda as f64) as f32;

    let mut coeffs = CoefficientMatrix {
        values: Tensor::zeros(&[n, m]),
    };
    let mut prev_obj = objective(target, &coeffs, dict, cfg.lambda);
    let mut iters = 0;
    for it in 0..cfg.max_ista {
        // residual R = alpha*D - target, gradient G = R * D^T
        let recon = matmul(coeffs.values.data(), dict.atoms.data(), n, m, d);
        let mut resid = recon;
        for (r, tgt) in resid.iter_mut().zip(target.data()) {
            *r -= tgt;
        }
        // G (n, m) = resid (n, d) * atoms^T (d, m)
        let atoms = dict.atoms.data();
        let mut atoms_t = vec![0.0f32; d * m];
        for l in 0..m {
            for p in 0..d {
                atoms_t[p * m + l] = atoms[l * d + p];
            }
        }
        let grad = matmul(&resid, &atoms_t, n, d, m);
        let vals = coeffs.values.data_mut();
        for (a, g) in vals.iter_mut().zip(&grad) {
            *a = soft_threshold(*a - (t as f32) * g, tau);
        }
        if !coeffs.values.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                context: "ISTA coefficient update".into(),
            });
        }
        iters = it + 1;
        let obj = objective(target, &coeffs, dict, cfg.lambda);
        debug_assert!(
            obj <= prev_obj * (1.0 + 1e-7) + 1e-9,
            "ISTA objective increased: {prev_obj} -> {obj} at iteration {it}"
        );
        let change = (prev_obj - obj).abs();
        if change <= cfg.tol * prev_obj.abs().max(1e-30) {
            prev_obj = obj;
            break;
        }
        prev_obj = obj;
    }
    let _ = prev_obj;
    Ok((coeffs, iters))
}

/// Solve (A + ridge*I) X = B with A symmetric positive (semi)definite,
/// via Cholesky in f64. A is (m, m), B is (m, d).
fn cholesky_solve(a: &[f64], b: &[f64], m: usize, d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; m * m];
    let scale = (0..m).map(|i| a[i * m + i].abs()).fold(0.0f64, f64::max);
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for p in 0..j {
                s -= l[i * m + p] * l[j * m + p];
            }
            if i == j {
                if s <= scale.max(1.0) * 1e-14 {
                    return Err(Error::SingularMatrix);
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    // forward/back substitution per column of B
    let mut x = b.to_vec();
    for c in 0..d {
        for i in 0..m {
            let mut s = x[i * d + c];
            for p in 0..i {
                s -= l[i * m + p] * x[p * d + c];
            }
            x[i * d + c] = s / l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut s = x[i * d + c];
            for p in (i + 1)..m {
                s -= l[p * m + i] * x[p * d + c];
            }
            x[i * d + c] = s / l[i * m + i];
        }
    }
    Ok(x)
}

/// Least-squares dictionary update with the coefficients fixed:
/// D = (alpha^T alpha + ridge*I)^-1 alpha^T target, rows rescaled to unit
/// norm with the scale folded into the coefficient columns. Rows that
/// collapse to zero are re-seeded from the largest-residual target row.
pub fn dictionary_update(
    target: &Tensor,
    coeffs: &mut CoefficientMatrix,
    ridge: f64,
) -> Result<Dictionary> {
    let n = target.shape()[0];
    let d = target.shape()[1];
    let m = coeffs.values.shape()[1];
    if coeffs.values.shape()[0] != n {
        return Err(Error::ShapeMismatch(format!(
            "coefficients have {} rows, target has {n}",
            coeffs.values.shape()[0]
        )));
    }
    let alpha = coeffs.values.data();
    // normal matrix alpha^T alpha (m, m) and rhs alpha^T target (m, d)
    let mut normal = vec![0.0f64; m * m];
    for r in 0..n {
        let row = &alpha[r * m..(r + 1) * m];
        for i in 0..m {
            if row[i] == 0.0 {
                continue;
            }
            let ai = row[i] as f64;
            for j in 0..m {
                normal[i * m + j] += ai * row[j] as f64;
            }
        }
    }
    for i in 0..m {
        normal[i * m + i] += ridge;
    }
    let mut rhs = vec![0.0f64; m * d];
    for r in 0..n {
        let row = &alpha[r * m..(r + 1) * m];
        let trow = &target.data()[r * d..(r + 1) * d];
        for i in 0..m {
            if row[i] == 0.0 {
                continue;
            }
            let ai = row[i] as f64;
            for p in 0..d {
                rhs[i * d + p] += ai * trow[p] as f64;
            }
        }
    }
    let solved = cholesky_solve(&normal, &rhs, m, d)?;
    let mut atoms = Tensor::zeros(&[m, d]);
    for (o, v) in atoms.data_mut().iter_mut().zip(&solved) {
        *o = *v as f32;
    }

    // residual rows for re-seeding dead atoms
    let recon = matmul(coeffs.values.data(), atoms.data(), n, m, d);
    let dead: Vec<usize> = (0..m)
        .filter(|&l| {
            let row = &atoms.data()[l * d..(l + 1) * d];
            row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() < 1e-8
        })
        .collect();
    if !dead.is_empty() {
        let mut best_row = 0usize;
        let mut best_norm = -1.0f64;
        for r in 0..n {
            let mut nrm = 0.0f64;
            for p in 0..d {
                let diff = target.data()[r * d + p] as f64 - recon[r * d + p] as f64;
                nrm += diff * diff;
            }
            if nrm > best_norm {
                best_norm = nrm;
                best_row = r;
            }
        }
        for &l in &dead {
            for p in 0..d {
                let v = target.data()[best_row * d + p] - recon[best_row * d + p];
                atoms.data_mut()[l * d + p] = v;
            }
            // refit from scratch for this atom
            for r in 0..n {
                coeffs.values.data_mut()[r * m + l] = 0.0;
            }
        }
    }

    // unit-norm rows, scale folded into the coefficient column
    for l in 0..m {
        let row_norm = {
            let row = &atoms.data()[l * d..(l + 1) * d];
            row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
        };
        if row_norm < 1e-30 {
            // target itself is degenerate; leave a unit basis vector
            atoms.data_mut()[l * d] = 1.0;
            continue;
        }
        let inv = (1.0 / row_norm) as f32;
        for p in 0..d {
            atoms.data_mut()[l * d + p] *= inv;
        }
        for r in 0..n {
            coeffs.values.data_mut()[r * m + l] *= row_norm as f32;
        }
    }
    Dictionary::new(atoms)
}

/// Seeded initialization: sample m target rows without replacement and
/// row-normalize them. If m exceeds the row count, the remainder is filled
/// with seeded unit gaussian rows.
fn init_dictionary(target: &Tensor, m: usize, seed: u64) -> Dictionary {
    let n = target.shape()[0];
    let d = target.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = Tensor::zeros(&[m, d]);
    let picks: Vec<usize> = if m <= n {
        sample(&mut rng, n, m).into_vec()
    } else {
        (0..n).collect()
    };
    for (l, &r) in picks.iter().enumerate() {
        for p in 0..d {
            atoms.data_mut()[l * d + p] = target.data()[r * d + p];
        }
    }
    for l in picks.len()..m {
        for p in 0..d {
            // Box-Muller-free: uniform is fine for an initial direction
            atoms.data_mut()[l * d + p] = rng.gen_range(-1.0..1.0);
        }
    }
    for l in 0..m {
        let norm = atoms.data()[l * d..(l + 1) * d]
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            atoms.data_mut()[l * d] = 1.0;
        } else {
            let inv = (1.0 / norm) as f32;
            for p in 0..d {
                atoms.data_mut()[l * d + p] *= inv;
            }
        }
    }
    Dictionary { atoms }
}

/// Full alternating decomposition of a (n, d) weight matrix into m atoms.
pub fn decompose(
    weights: &Tensor,
    m: usize,
    cfg: &SparseCodingConfig,
) -> Result<(CoefficientMatrix, Dictionary, DecomposeReport)> {
    if weights.rank() != 2 {
        return Err(Error::ShapeMismatch("decompose expects a matrix".into()));
    }
    if !weights.is_finite() {
        return Err(Error::InvalidArgument("weights contain non-finite values".into()));
    }
    let n = weights.shape()[0];
    let d = weights.shape()[1];
    if m == 0 || m > n * d {
        return Err(Error::InvalidArgument(format!(
            "m = {m} out of range for a {n}x{d} target"
        )));
    }
    let mut dict = init_dictionary(weights, m, cfg.seed);
    let mut coeffs = CoefficientMatrix {
        values: Tensor::zeros(&[n, m]),
    };
    let mut report = DecomposeReport {
        objective_per_round: Vec::new(),
        final_relative_error: f64::NAN,
        lambda: cfg.lambda,
        m,
        outer_rounds: 0,
        ista_iterations: 0,
        seed: cfg.seed,
        converged: false,
    };
    let mut prev_obj = f64::INFINITY;
    for _round in 0..cfg.max_outer {
        let (c, iters) = ista_coefficients_traced(weights, &dict, cfg)?;
        coeffs = c;
        report.ista_iterations += iters;
        dict = dictionary_update(weights, &mut coeffs, cfg.ridge)?;
        let obj = objective(weights, &coeffs, &dict, cfg.lambda);
        report.objective_per_round.push(obj);
        report.outer_rounds += 1;
        if prev_obj.is_finite() && (prev_obj - obj).abs() <= cfg.tol * prev_obj.abs().max(1e-30) {
            report.converged = true;
            break;
        }
        prev_obj = obj;
    }
    let recon = matmul(coeffs.values.data(), dict.atoms.data(), n, m, d);
    let mut err = 0.0f64;
    for (r, t) in recon.iter().zip(weights.data()) {
        let diff = *r as f64 - *t as f64;
        err += diff * diff;
    }
    let tnorm = weights.frob_norm();
    report.final_relative_error = if tnorm > 0.0 {
        err.sqrt() / tnorm
    } else {
        0.0
    };
    Ok((coeffs, dict, report))
}
