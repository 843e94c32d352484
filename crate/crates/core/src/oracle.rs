//! Brute-force reference computations for tests.
//!
//! Nothing here calls into nalgebra's decompositions; these routines are the
//! independent side of every dual-route check.
#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)]).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i][j] * m[i][j];
                }
            }
        }
        if off.sqrt() < 1e-15 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            aug[(i, j)] = a[(i, j)];
        }
        aug[(i, n + i)] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| {
                aug[(x, col)]
                    .abs()
                    .partial_cmp(&aug[(y, col)].abs())
                    .unwrap()
            })
            .unwrap();
        aug.swap_rows(col, pivot);
        let p = aug[(col, col)];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for j in 0..2 * n {
            aug[(col, j)] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = aug[(i, col)];
                if f != 0.0 {
                    for j in 0..2 * n {
                        let v = aug[(col, j)];
                        aug[(i, j)] -= f * v;
                    }
                }
            }
        }
    }
    aug.columns(n, n).into_owned()
}

/// Lower Cholesky factor by the textbook recurrence.
pub fn cholesky_lower(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite in oracle");
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    l
}

/// Eigenvalues `μ` of the pencil `B v = μ A v` for SPD `A`, ascending.
pub fn generalized_eigenvalues(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Vec<f64> {
    let l = cholesky_lower(a);
    let linv = gauss_jordan_inverse(&l);
    let c = &linv * b * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    jacobi_eigenvalues(&c)
}

/// Monte-Carlo estimate of `E_w[xᵀz·1{wᵀx ≥ 0}·1{wᵀz ≥ 0}]`, with its standard error.
pub fn ntk_monte_carlo<R: Rng>(
    x: &DVector<f64>,
    z: &DVector<f64>,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let dot = x.dot(z);
    let d = x.len();
    let mut hits = 0usize;
    let mut w = vec![0.0; d];
    for _ in 0..samples {
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let a: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let b: f64 = w.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        if a >= 0.0 && b >= 0.0 {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let mean = dot * p;
    let se = dot.abs() * (p * (1.0 - p) / samples as f64).sqrt();
    (mean, se)
}
