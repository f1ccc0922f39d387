//! Kronecker-sum factorization of linear and 1x1-convolution layers:
//! W = sum_i A_i kron B_i, with the block coefficients A frozen and the
//! block atoms B tunable.
//!
//! Under the standard block rearrangement, a Kronecker sum is exactly a
//! rank-m_c coefficient-times-atom factorization, so the decomposition
//! reuses the sparse-coding solver.

use crate::error::{Error, Result};
use crate::sparse::{self, SparseCodingConfig};
use crate::tensor::{kron, Tensor};

/// m_c pairs of frozen block coefficients A_i and tunable block atoms B_i.
#[derive(Debug, Clone)]
pub struct KronFactors {
    /// Coefficients, (m_c, c_out/k_rows, c_in/k_cols). Frozen during tuning.
    pub a: Tensor,
    /// Atoms, (m_c, k_rows, k_cols). Tunable.
    pub b: Tensor,
    /// Block height (divides c_out).
    pub k_rows: usize,
    /// Block width (divides c_in).
    pub k_cols: usize,
}

impl KronFactors {
    pub fn num_pairs(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.a.shape()[1] * self.k_rows
    }

    pub fn in_features(&self) -> usize {
        self.a.shape()[2] * self.k_cols
    }

    /// Tunable parameters: m_c * k_rows * k_cols.
    pub fn tunable_count(&self) -> usize {
        self.b.len()
    }
}

/// Rearrange W (rows, cols) into a ((rows/k_rows)*(cols/k_cols), k_rows*k_cols)
/// matrix whose row (p,q) is the vectorized (p,q) block of W.
pub fn block_rearrange(w: &Tensor, k_rows: usize, k_cols: usize) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch("block_rearrange expects a matrix".into()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if k_rows == 0 || k_cols == 0 || rows % k_rows != 0 || cols % k_cols != 0 {
        return Err(Error::InvalidArgument(format!(
            "block size ({k_rows}, {k_cols}) does not divide ({rows}, {cols})"
        )));
    }
    let (p_e, q_e) = (rows / k_rows, cols / k_cols);
    let mut out = Tensor::zeros(&[p_e * q_e, k_rows * k_cols]);
    for p in 0..p_e {
        for q in 0..q_e {
            let row = p * q_e + q;
            for u in 0..k_rows {
                for v in 0..k_cols {
                    out.data_mut()[row * k_rows * k_cols + u * k_cols + v] =
                        w.data()[(p * k_rows + u) * cols + q * k_cols + v];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`block_rearrange`]; round-trips bitwise.
pub fn block_unrearrange(
    rearranged: &Tensor,
    rows: usize,
    cols: usize,
    k_rows: usize,
    k_cols: usize,
) -> Result<Tensor> {
    let (p_e, q_e) = (rows / k_rows, cols / k_cols);
    if rearranged.shape() != [p_e * q_e, k_rows * k_cols] {
        return Err(Error::ShapeMismatch("rearranged shape mismatch".into()));
    }
    let mut w = Tensor::zeros(&[rows, cols]);
    for p in 0..p_e {
        for q in 0..q_e {
            let row = p * q_e + q;
            for u in 0..k_rows {
                for v in 0..k_cols {
                    w.data_mut()[(p * k_rows + u) * cols + q * k_cols + v] =
                        rearranged.data()[row * k_rows * k_cols + u * k_cols + v];
                }
            }
        }
    }
    Ok(w)
}

/// Decompose W into m_c Kronecker pairs by sparse-coding the block
/// rearrangement. The atoms (rows of the learned dictionary) become the
/// B_i, the coefficients become the A_i.
pub fn decompose_linear(
    w: &Tensor,
    m_c: usize,
    k_rows: usize,
    k_cols: usize,
    cfg: &SparseCodingConfig,
) -> Result<(KronFactors, sparse::DecomposeReport)> {
    if m_c == 0 {
        return Err(Error::InvalidArgument("m_c must be >= 1".into()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let target = block_rearrange(w, k_rows, k_cols)?;
    let (coeffs, dict, report) = sparse::decompose(&target, m_c, cfg)?;
    let (p_e, q_e) = (rows / k_rows, cols / k_cols);
    // coeffs is (p_e*q_e, m_c); A[i][p][q] = coeffs[p*q_e+q][i]
    let a = coeffs
        .values
        .reshape(&[p_e, q_e, m_c])?
        .permute(&[2, 0, 1]);
    let b = dict.atoms.reshape(&[m_c, k_rows, k_cols])?;
    Ok((
        KronFactors {
            a,
            b,
            k_rows,
            k_cols,
        },
        report,
    ))
}

/// W = sum_i kron(A_i, B_i).
pub fn compose_linear(f: &KronFactors) -> Tensor {
    let m_c = f.num_pairs();
    let (p_e, q_e) = (f.a.shape()[1], f.a.shape()[2]);
    let mut w = Tensor::zeros(&[p_e * f.k_rows, q_e * f.k_cols]);
    for i in 0..m_c {
        let ai = Tensor::new(
            vec![p_e, q_e],
            f.a.data()[i * p_e * q_e..(i + 1) * p_e * q_e].to_vec(),
        )
        .expect("factor slice");
        let bi = Tensor::new(
            vec![f.k_rows, f.k_cols],
            f.b.data()[i * f.k_rows * f.k_cols..(i + 1) * f.k_rows * f.k_cols].to_vec(),
        )
        .expect("factor slice");
        let term = kron(&ai, &bi).expect("rank-2 factors");
        w.add_assign(&term).expect("same shape");
    }
    w
}

/// Gradient for the block atoms with A frozen:
/// grad_B[i] = sum_{p,q} A[i,p,q] * block_{p,q}(grad_W).
pub fn backward_kron(f: &KronFactors, grad_w: &Tensor) -> Result<Tensor> {
    let (p_e, q_e) = (f.a.shape()[1], f.a.shape()[2]);
    let (rows, cols) = (p_e * f.k_rows, q_e * f.k_cols);
    if grad_w.shape() != [rows, cols] {
        return Err(Error::ShapeMismatch(format!(
            "grad_W shape {:?}, expected ({rows}, {cols})",
            grad_w.shape()
        )));
    }
    let m_c = f.num_pairs();
    let kk = f.k_rows * f.k_cols;
    let mut out = Tensor::zeros(&[m_c, f.k_rows, f.k_cols]);
    let mut acc = vec![0.0f64; m_c * kk];
    for p in 0..p_e {
        for q in 0..q_e {
            for i in 0..m_c {
                let a = f.a.at(&[i, p, q]) as f64;
                if a == 0.0 {
                    continue;
                }
                for u in 0..f.k_rows {
                    for v in 0..f.k_cols {
                        acc[i * kk + u * f.k_cols + v] += a
                            * grad_w.data()[(p * f.k_rows + u) * cols + q * f.k_cols + v] as f64;
                    }
                }
            }
        }
    }
    for (o, v) in out.data_mut().iter_mut().zip(&acc) {
        *o = *v as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rearranged_kron_is_rank_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = rand_tensor(&[3, 2], &mut rng);
        let b = rand_tensor(&[2, 4], &mut rng);
        let w = kron(&a, &b).unwrap();
        let re = block_rearrange(&w, 2, 4).unwrap();
        // re == vec(a) * vec(b)^T, so every 2x2 minor vanishes
        let (rows, cols) = (re.shape()[0], re.shape()[1]);
        for r1 in 0..rows {
            for r2 in (r1 + 1)..rows {
                for c1 in 0..cols {
                    for c2 in (c1 + 1)..cols {
                        let minor = re.at(&[r1, c1]) * re.at(&[r2, c2])
                            - re.at(&[r1, c2]) * re.at(&[r2, c1]);
                        assert!(minor.abs() <= 1e-5);
                    }
                }
            }
        }
        // and the entries match vec(a) vec(b)^T directly
        for p in 0..3 {
            for q in 0..2 {
                for u in 0..2 {
                    for v in 0..4 {
                        let expect = a.at(&[p, q]) * b.at(&[u, v]);
                        assert!((re.at(&[p * 2 + q, u * 4 + v]) - expect).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn whole_matrix_block_is_single_row() {
        let mut rng = StdRng::seed_from_u64(2);
        let w = rand_tensor(&[4, 6], &mut rng);
        let re = block_rearrange(&w, 4, 6).unwrap();
        assert_eq!(re.shape(), &[1, 24]);
        assert_eq!(re.data(), w.data());
    }

    #[test]
    fn rearrange_round_trips_bitwise() {
        let mut rng = StdRng::seed_from_u64(3);
        let w = rand_tensor(&[8, 12], &mut rng);
        let re = block_rearrange(&w, 2, 3).unwrap();
        let back = block_unrearrange(&re, 8, 12, 2, 3).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn rearrange_rejects_non_divisible() {
        let w = Tensor::zeros(&[6, 6]);
        assert!(block_rearrange(&w, 4, 3).is_err());
    }

    #[test]
    fn compose_block_diagonal_and_zero() {
        let mut rng = StdRng::seed_from_u64(4);
        // m_c = 1, A = 2 * I: block diagonal of 2B
        let a = Tensor::from_fn(&[1, 2, 2], |ix| if ix[1] == ix[2] { 2.0 } else { 0.0 });
        let b = rand_tensor(&[1, 3, 3], &mut rng);
        let f = KronFactors {
            a,
            b: b.clone(),
            k_rows: 3,
            k_cols: 3,
        };
        let w = compose_linear(&f);
        for p in 0..2 {
            for u in 0..3 {
                for v in 0..3 {
                    assert_eq!(w.at(&[p * 3 + u, p * 3 + v]), 2.0 * b.at(&[0, u, v]));
                    let off = (p + 1) % 2;
                    assert_eq!(w.at(&[p * 3 + u, off * 3 + v]), 0.0);
                }
            }
        }
        // all-zero atoms give the zero matrix
        let zf = KronFactors {
            a: rand_tensor(&[2, 2, 2], &mut rng),
            b: Tensor::zeros(&[2, 3, 3]),
            k_rows: 3,
            k_cols: 3,
        };
        assert!(compose_linear(&zf).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_kron_sum_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let f = KronFactors {
            a: rand_tensor(&[3, 2, 4], &mut rng),
            b: rand_tensor(&[3, 2, 2], &mut rng),
            k_rows: 2,
            k_cols: 2,
        };
        let w = compose_linear(&f);
        let mut oracle = Tensor::zeros(&[4, 8]);
        for i in 0..3 {
            let ai = Tensor::new(vec![2, 4], f.a.data()[i * 8..(i + 1) * 8].to_vec()).unwrap();
            let bi = Tensor::new(vec![2, 2], f.b.data()[i * 4..(i + 1) * 4].to_vec()).unwrap();
            oracle.add_assign(&kron(&ai, &bi).unwrap()).unwrap();
        }
        for (x, y) in w.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn decompose_planted_pairs() {
        let mut rng = StdRng::seed_from_u64(6);
        let truth = KronFactors {
            a: rand_tensor(&[2, 3, 3], &mut rng),
            b: rand_tensor(&[2, 4, 4], &mut rng),
            k_rows: 4,
            k_cols: 4,
        };
        let w = compose_linear(&truth);
        let cfg = SparseCodingConfig {
            lambda: 0.0,
            max_outer: 80,
            max_ista: 500,
            tol: 1e-12,
            ridge: 1e-9,
            seed: 9,
        };
        let (f, report) = decompose_linear(&w, 2, 4, 4, &cfg).unwrap();
        assert!(report.final_relative_error <= 1e-4, "{}", report.final_relative_error);
        let recon = compose_linear(&f);
        let mut err = 0.0f64;
        for (x, y) in recon.data().iter().zip(w.data()) {
            err += ((*x - *y) as f64).powi(2);
        }
        assert!(err.sqrt() / w.frob_norm() <= 1e-4);
    }

    #[test]
    fn decompose_complete_basis_is_exact() {
        let mut rng = StdRng::seed_from_u64(7);
        let w = rand_tensor(&[6, 6], &mut rng);
        // m_c = k_rows * k_cols = 4: complete block basis
        let cfg = SparseCodingConfig {
            lambda: 0.0,
            max_outer: 80,
            max_ista: 500,
            tol: 1e-12,
            ridge: 1e-9,
            seed: 4,
        };
        let (_, report) = decompose_linear(&w, 4, 2, 2, &cfg).unwrap();
        assert!(report.final_relative_error <= 1e-4);
    }

    #[test]
    fn backward_kron_trivial_cases() {
        let mut rng = StdRng::seed_from_u64(8);
        let f = KronFactors {
            a: rand_tensor(&[2, 2, 2], &mut rng),
            b: rand_tensor(&[2, 2, 2], &mut rng),
            k_rows: 2,
            k_cols: 2,
        };
        let zero = Tensor::zeros(&[4, 4]);
        let g = backward_kron(&f, &zero).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        // m_c = 1, A all ones: grad_B = sum of the blocks of grad_W
        let ones = KronFactors {
            a: Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap(),
            b: Tensor::zeros(&[1, 2, 2]),
            k_rows: 2,
            k_cols: 2,
        };
        let gw = rand_tensor(&[4, 4], &mut rng);
        let gb = backward_kron(&ones, &gw).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                let mut sum = 0.0f64;
                for p in 0..2 {
                    for q in 0..2 {
                        sum += gw.at(&[p * 2 + u, q * 2 + v]) as f64;
                    }
                }
                assert!((gb.at(&[0, u, v]) as f64 - sum).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn backward_kron_matches_finite_difference() {
        // L = ||W x - y||^2 / 2 for fixed x, y
        let mut rng = StdRng::seed_from_u64(9);
        let mut f = KronFactors {
            a: rand_tensor(&[2, 2, 3], &mut rng),
            b: rand_tensor(&[2, 2, 2], &mut rng),
            k_rows: 2,
            k_cols: 2,
        };
        let x: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |f: &KronFactors| -> f64 {
            let w = compose_linear(f);
            let mut l = 0.0f64;
            for r in 0..4 {
                let mut acc = 0.0f64;
                for c in 0..6 {
                    acc += w.at(&[r, c]) as f64 * x[c] as f64;
                }
                l += (acc - y[r] as f64).powi(2) / 2.0;
            }
            l
        };
        // analytic: grad_W[r][c] = (Wx - y)[r] * x[c]
        let w = compose_linear(&f);
        let mut grad_w = Tensor::zeros(&[4, 6]);
        for r in 0..4 {
            let mut acc = 0.0f64;
            for c in 0..6 {
                acc += w.at(&[r, c]) as f64 * x[c] as f64;
            }
            let resid = acc as f32 - y[r];
            for c in 0..6 {
                grad_w.set(&[r, c], resid * x[c]);
            }
        }
        let gb = backward_kron(&f, &grad_w).unwrap();
        let h = 1e-3f32;
        for p in 0..f.b.len() {
            let orig = f.b.data()[p];
            f.b.data_mut()[p] = orig + h;
            let lp = loss(&f);
            f.b.data_mut()[p] = orig - h;
            let lm = loss(&f);
            f.b.data_mut()[p] = orig;
            let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
            let g = gb.data()[p];
            assert!(
                (fd - g).abs() <= 1e-3 * g.abs().max(1.0),
                "fd {fd} vs analytic {g}"
            );
        }
    }
}
