//! Kernel Gram matrices, spectral utilities and the Loewner sandwich certificate.
//!
//! The ReLU neural tangent kernel used throughout is the first-layer NTK
//!
//! ```text
//! k(x, z) = E_{w ~ N(0, I)}[ xᵀz · 1{wᵀx ≥ 0} · 1{wᵀz ≥ 0} ]
//! ```
//!
//! which for unit-norm inputs has the closed form
//! `xᵀz · (π − arccos(xᵀz)) / (2π)`. [`ntk_gram_empirical`] keeps the
//! sampling definition available for cross-checks.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{check_unit_rows, check_unit_vector, fmt_f64};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues below `-PSD_REL_TOL · ‖K‖` reject a matrix as not PSD.
pub const PSD_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    NtkExact,
    NtkEmpirical,
    FeatureGram,
    RbfExact,
}

/// A symmetric Gram matrix tagged with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    kind: KernelKind,
}

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>, kind: KernelKind) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::DimensionMismatch {
                context: "kernel matrix columns",
                expected: values.nrows(),
                found: values.ncols(),
            });
        }
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (values[(i, j)] - values[(j, i)]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(Error::Domain(format!(
                        "kernel matrix asymmetric at ({i}, {j}) by {gap:e}"
                    )));
                }
            }
        }
        Ok(Self { values, kind })
    }

    /// Builds from a matrix that is symmetric up to rounding, averaging it
    /// with its transpose.
    pub fn symmetrized(values: DMatrix<f64>, kind: KernelKind) -> Result<Self> {
        let sym = (&values + values.transpose()) * 0.5;
        Self::new(sym, kind)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        sorted_eigenvalues(&self.values)
    }

    pub fn spectral_norm(&self) -> f64 {
        symmetric_spectral_norm(&self.values)
    }

    pub fn frobenius_distance(&self, other: &KernelMatrix) -> f64 {
        (&self.values - &other.values).norm()
    }

    /// Writes `n` rows of `n` comma-separated reals plus a one-line JSON
    /// sidecar next to it (same stem, `.json` extension).
    pub fn write_csv(&self, path: impl AsRef<Path>, lambda: Option<f64>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        for row in self.values.row_iter() {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush()?;
        let sidecar = KernelSidecar {
            kind: self.kind,
            n: self.n(),
            lambda,
        };
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string(&sidecar)? + "\n",
        )?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Self, KernelSidecar)> {
        let path = path.as_ref();
        let sidecar: KernelSidecar =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        let mut vals = Vec::with_capacity(sidecar.n * sidecar.n);
        for rec in r.records() {
            for s in rec?.iter() {
                vals.push(
                    s.parse::<f64>()
                        .map_err(|e| Error::Domain(format!("bad number `{s}`: {e}")))?,
                );
            }
        }
        if vals.len() != sidecar.n * sidecar.n {
            return Err(Error::DimensionMismatch {
                context: "kernel CSV entries",
                expected: sidecar.n * sidecar.n,
                found: vals.len(),
            });
        }
        let k = KernelMatrix::new(
            DMatrix::from_row_slice(sidecar.n, sidecar.n, &vals),
            sidecar.kind,
        )?;
        Ok((k, sidecar))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub kind: KernelKind,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
}

pub(crate) fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub(crate) fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Closed-form NTK entry for unit vectors with inner product `dot`.
pub fn ntk_entry(dot: f64) -> f64 {
    let c = dot.clamp(-1.0, 1.0);
    dot * (PI - c.acos()) / (2.0 * PI)
}

/// The same entry computed from the unit vectors themselves. The angle comes
/// from `2·atan2(‖x − z‖, ‖x + z‖)`, which stays accurate where `arccos` of a
/// dot product near ±1 loses half its digits.
fn ntk_entry_unit<'a>(
    x: impl Iterator<Item = &'a f64> + Clone,
    z: impl Iterator<Item = &'a f64> + Clone,
) -> f64 {
    let (mut dot, mut diff, mut sum) = (0.0, 0.0, 0.0);
    for (a, b) in x.zip(z) {
        dot += a * b;
        diff += (a - b) * (a - b);
        sum += (a + b) * (a + b);
    }
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    dot * (PI - angle) / (2.0 * PI)
}

pub fn ntk_gram(x: &DMatrix<f64>) -> Result<KernelMatrix> {
    check_unit_rows(x, "input")?;
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let values = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        ntk_entry_unit(rows[a].iter(), rows[b].iter())
    });
    KernelMatrix::new(values, KernelKind::NtkExact)
}

pub fn ntk_kernel_vec(x_test: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_unit_vector(x_test, "test point")?;
    check_unit_rows(x, "input")?;
    if x_test.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "test point",
            expected: x.ncols(),
            found: x_test.len(),
        });
    }
    Ok(DVector::from_iterator(
        x.nrows(),
        x.row_iter()
            .map(|row| ntk_entry_unit(row.iter(), x_test.iter())),
    ))
}

/// The NTK Gram estimated by averaging the indicator product over `samples`
/// Gaussian directions.
pub fn ntk_gram_empirical(
    x: &DMatrix<f64>,
    samples: usize,
    seed: SeedStream,
) -> Result<KernelMatrix> {
    check_unit_rows(x, "input")?;
    let (n, d) = x.shape();
    let mut rng = seed.rng();
    let mut counts = DMatrix::<f64>::zeros(n, n);
    let mut active = vec![false; n];
    let mut w = DVector::zeros(d);
    for _ in 0..samples {
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (i, a) in active.iter_mut().enumerate() {
            *a = x.row(i).dot(&w.transpose()) >= 0.0;
        }
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i..n {
                if active[j] {
                    counts[(i, j)] += 1.0;
                }
            }
        }
    }
    let gram = x * x.transpose();
    let values = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        gram[(a, b)] * counts[(a, b)] / samples as f64
    });
    KernelMatrix::new(values, KernelKind::NtkEmpirical)
}

pub fn rbf_entry(sq_dist: f64, bandwidth: f64) -> f64 {
    (-0.5 * bandwidth * bandwidth * sq_dist).exp()
}

/// Gaussian RBF Gram `exp(−σ²‖x − z‖²/2)`.
pub fn rbf_gram(x: &DMatrix<f64>, bandwidth: f64) -> Result<KernelMatrix> {
    let n = x.nrows();
    let values = DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        rbf_entry((x.row(a) - x.row(b)).norm_squared(), bandwidth)
    });
    KernelMatrix::new(values, KernelKind::RbfExact)
}

pub fn rbf_kernel_vec(x_test: &DVector<f64>, x: &DMatrix<f64>, bandwidth: f64) -> DVector<f64> {
    DVector::from_iterator(
        x.nrows(),
        x.row_iter()
            .map(|row| rbf_entry((row - x_test.transpose()).norm_squared(), bandwidth)),
    )
}

fn check_psd(eigs: &[f64], norm: f64) -> Result<()> {
    let min = eigs.first().copied().unwrap_or(0.0);
    if min < -PSD_REL_TOL * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// `s_λ(K) = Tr[(K + λI)⁻¹K] = Σ λ_i / (λ_i + λ)`.
pub fn statistical_dimension(k: &KernelMatrix, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "statistical dimension needs lambda > 0, got {lambda}"
        )));
    }
    let eigs = k.eigenvalues();
    let norm = eigs.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    check_psd(&eigs, norm)?;
    Ok(eigs
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            l / (l + lambda)
        })
        .sum())
}

pub fn min_eigenvalue(k: &KernelMatrix) -> f64 {
    k.eigenvalues().first().copied().unwrap_or(0.0)
}

/// `K + λI` together with its eigendecomposition `Q diag(σ²) Qᵀ`.
#[derive(Debug, Clone)]
pub struct RegularizedKernel {
    kernel: KernelMatrix,
    lambda: f64,
    /// Orthonormal eigenvectors as columns.
    eigenvectors: DMatrix<f64>,
    /// Eigenvalues of `K + λI`, ascending.
    eigenvalues: DVector<f64>,
}

impl RegularizedKernel {
    pub fn new(kernel: KernelMatrix, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!(
                "regularization must be positive, got {lambda}"
            )));
        }
        let n = kernel.n();
        let reg = kernel.values() + DMatrix::identity(n, n) * lambda;
        let eig = SymmetricEigen::new(reg.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);

        let k_norm = kernel.spectral_norm();
        if n > 0 && eigenvalues[0] < lambda - PSD_REL_TOL * k_norm.max(1.0) {
            return Err(Error::NotPsd {
                min_eigenvalue: eigenvalues[0] - lambda,
            });
        }
        let rebuilt =
            &eigenvectors * DMatrix::from_diagonal(&eigenvalues) * eigenvectors.transpose();
        let recon = (&rebuilt - &reg).norm();
        if recon > 1e-8 * reg.norm() {
            return Err(Error::Domain(format!(
                "eigendecomposition residual {recon:e} too large"
            )));
        }
        Ok(Self {
            kernel,
            lambda,
            eigenvectors,
            eigenvalues,
        })
    }

    pub fn kernel(&self) -> &KernelMatrix {
        &self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Eigenvalues of `K + λI`, ascending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Smallest eigenvalue of the unregularized kernel.
    pub fn lambda0(&self) -> f64 {
        self.eigenvalues[0] - self.lambda
    }

    pub fn statistical_dimension(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&s| (s - self.lambda).max(0.0) / s)
            .sum()
    }

    /// `(K + λI)⁻¹` assembled from the eigendecomposition.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.eigenvalues.map(|s| 1.0 / s);
        &self.eigenvectors * DMatrix::from_diagonal(&inv) * self.eigenvectors.transpose()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.eigenvectors.transpose() * b;
        let scaled = coeffs.component_div(&self.eigenvalues);
        &self.eigenvectors * scaled
    }

    /// `Σ⁻¹Qᵀ A Q Σ⁻¹` for a symmetric `A`.
    pub fn whiten(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let inv_sqrt = self.eigenvalues.map(|s| 1.0 / s.sqrt());
        let mut m = self.eigenvectors.transpose() * a * &self.eigenvectors;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        (&m + m.transpose()) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichCertificate {
    pub holds: bool,
    pub worst_deviation: f64,
}

/// Spectral norm of `(K + λI)^{-1/2}(A − K)(K + λI)^{-1/2}`.
pub fn whitened_deviation(a_raw: &KernelMatrix, reg: &RegularizedKernel) -> Result<f64> {
    if a_raw.n() != reg.n() {
        return Err(Error::DimensionMismatch {
            context: "sandwich check",
            expected: reg.n(),
            found: a_raw.n(),
        });
    }
    let diff = a_raw.values() - reg.kernel().values();
    Ok(symmetric_spectral_norm(&reg.whiten(&diff)))
}

/// Certifies `(1−ε)(K+λI) ⪯ A + λI ⪯ (1+ε)(K+λI)` for the unregularized
/// empirical Gram `A`.
pub fn psd_sandwich_check(
    a_raw: &KernelMatrix,
    reg: &RegularizedKernel,
    eps: f64,
) -> Result<SandwichCertificate> {
    let worst_deviation = whitened_deviation(a_raw, reg)?;
    Ok(SandwichCertificate {
        holds: worst_deviation <= eps,
        worst_deviation,
    })
}
