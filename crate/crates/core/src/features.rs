//! Random feature families, plain and ridge-leverage sampling of feature
//! weights, and the reweighted feature matrix `Ψ̄`.
//!
//! A family supplies `φ(x, w) ∈ R^{d2}` with `k(x, z) = E_{w~N(0,I)}[φ(x,w)ᵀφ(z,w)]`.
//! Leverage sampling draws `w` from `q(w) ∝ p(w)·Tr[Φ(w)ᵀ(K+λI)⁻¹Φ(w)]` by
//! rejection from the Gaussian, and every sample carries the importance
//! weight `√(p(w)/q(w))` so that `E_q[Ψ̄Ψ̄ᵀ] = K`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{check_unit_rows, fmt_f64};
use crate::error::{Error, Result};
use crate::kernels::{
    ntk_gram, ntk_kernel_vec, rbf_gram, rbf_kernel_vec, KernelKind, KernelMatrix, RegularizedKernel,
};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureFamily {
    /// `φ(x, w) = x·1{wᵀx ≥ 0}`; induces the ReLU NTK.
    ReluNtk,
    /// `φ(x, w) = [cos(σ wᵀx), sin(σ wᵀx)]`; induces `exp(−σ²‖x−z‖²/2)`.
    FourierRbf { bandwidth: f64 },
}

impl FeatureFamily {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureFamily::ReluNtk => "relu_ntk",
            FeatureFamily::FourierRbf { .. } => "fourier_rbf",
        }
    }

    /// Output dimension of `φ` for inputs in `R^d`.
    pub fn d2(&self, d: usize) -> usize {
        match self {
            FeatureFamily::ReluNtk => d,
            FeatureFamily::FourierRbf { .. } => 2,
        }
    }

    pub fn exact_kernel(&self, x: &DMatrix<f64>) -> Result<KernelMatrix> {
        match *self {
            FeatureFamily::ReluNtk => ntk_gram(x),
            FeatureFamily::FourierRbf { bandwidth } => rbf_gram(x, bandwidth),
        }
    }

    pub fn exact_kernel_vec(
        &self,
        x_test: &DVector<f64>,
        x: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        match *self {
            FeatureFamily::ReluNtk => ntk_kernel_vec(x_test, x),
            FeatureFamily::FourierRbf { bandwidth } => Ok(rbf_kernel_vec(x_test, x, bandwidth)),
        }
    }

    fn write_phi<'a>(
        &self,
        x: impl Iterator<Item = &'a f64> + Clone,
        w: &DVector<f64>,
        out: &mut [f64],
    ) {
        let proj: f64 = x.clone().zip(w.iter()).map(|(a, b)| a * b).sum();
        match *self {
            FeatureFamily::ReluNtk => {
                let on = proj >= 0.0;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = if on { *xi } else { 0.0 };
                }
            }
            FeatureFamily::FourierRbf { bandwidth } => {
                let (s, c) = (bandwidth * proj).sin_cos();
                out[0] = c;
                out[1] = s;
            }
        }
    }
}

pub fn phi(family: FeatureFamily, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(family.d2(x.len()));
    family.write_phi(x.iter(), w, out.as_mut_slice());
    out
}

/// `Φ(w)`: the `n × d2` matrix whose row `i` is `φ(x_i, w)ᵀ`.
pub fn phi_matrix(family: FeatureFamily, w: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let d2 = family.d2(x.ncols());
    let mut out = DMatrix::zeros(x.nrows(), d2);
    let mut buf = vec![0.0; d2];
    for (i, row) in x.row_iter().enumerate() {
        family.write_phi(row.iter(), w, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    out
}

/// A sampled weight vector with its frozen importance weight `√(p(w)/q(w))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub w: DVector<f64>,
    pub weight: f64,
    /// `q̃(w)/p(w)` at sampling time; `None` for plain Gaussian samples.
    pub lev_ratio: Option<f64>,
}

pub fn sample_gaussian_features(
    _family: FeatureFamily,
    m: usize,
    d: usize,
    seed: SeedStream,
) -> Vec<FeatureSample> {
    let mut rng = seed.rng();
    (0..m)
        .map(|_| FeatureSample {
            w: gaussian_vector(d, &mut rng),
            weight: 1.0,
            lev_ratio: None,
        })
        .collect()
}

pub(crate) fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `Tr[Φ(w)ᵀ(K+λI)⁻¹Φ(w)]`, i.e. `q_λ(w)/p(w)`.
pub fn ridge_leverage_ratio(
    family: FeatureFamily,
    w: &DVector<f64>,
    x: &DMatrix<f64>,
    reg: &RegularizedKernel,
) -> f64 {
    let phi = phi_matrix(family, w, x);
    let mut proj = reg.eigenvectors().transpose() * phi;
    for (i, mut row) in proj.row_iter_mut().enumerate() {
        row /= reg.eigenvalues()[i].sqrt();
    }
    proj.norm_squared()
}

/// A sampling density `q̄ = q̃/s_q̃` with `q̃ = p·g`, expressed through `g`.
///
/// Rejection sampling proposes from `p` and accepts with probability
/// `g(w)/envelope`, so `envelope` must bound `g` from above.
pub trait ImportanceDensity {
    /// `g(w) = q̃(w)/p(w)`.
    fn ratio(&self, w: &DVector<f64>) -> f64;
    /// Upper bound on [`ratio`](Self::ratio).
    fn envelope(&self) -> f64;
    /// `s_q̃ = E_p[g]`.
    fn normalizer(&self) -> f64;
}

/// The exact ridge leverage density for a feature family on a dataset.
#[derive(Debug, Clone)]
pub struct LeverageDensity {
    family: FeatureFamily,
    x: DMatrix<f64>,
    inverse: DMatrix<f64>,
    /// `(K+λI)⁻¹ ∘ XXᵀ`, used by the ReLU fast path.
    relu_weights: Option<DMatrix<f64>>,
    s_lambda: f64,
    envelope: f64,
}

impl LeverageDensity {
    pub fn new(family: FeatureFamily, x: &DMatrix<f64>, reg: &RegularizedKernel) -> Result<Self> {
        if reg.n() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "leverage density",
                expected: x.nrows(),
                found: reg.n(),
            });
        }
        if let FeatureFamily::ReluNtk = family {
            check_unit_rows(x, "input")?;
        }
        let inverse = reg.inverse();
        let relu_weights = match family {
            FeatureFamily::ReluNtk => Some(inverse.component_mul(&(x * x.transpose()))),
            FeatureFamily::FourierRbf { .. } => None,
        };
        let s_lambda = reg.statistical_dimension();
        if !(s_lambda > 0.0) {
            return Err(Error::Domain("statistical dimension is zero".into()));
        }
        // Tr[Φ(w)ᵀ(K+λI)⁻¹Φ(w)] ≤ ‖Φ(w)‖_F² / (Λ₀+λ) ≤ n / (Λ₀+λ) since ‖φ‖ ≤ 1.
        let envelope = x.nrows() as f64 / reg.eigenvalues()[0];
        Ok(Self {
            family,
            x: x.clone(),
            inverse,
            relu_weights,
            s_lambda,
            envelope,
        })
    }

    pub fn s_lambda(&self) -> f64 {
        self.s_lambda
    }

    pub fn family(&self) -> FeatureFamily {
        self.family
    }

    /// Probability that a Gaussian proposal is accepted, `s_λ / envelope`.
    pub fn acceptance_probability(&self) -> f64 {
        self.s_lambda / self.envelope
    }
}

impl ImportanceDensity for LeverageDensity {
    fn ratio(&self, w: &DVector<f64>) -> f64 {
        match &self.relu_weights {
            Some(g) => {
                let active: Vec<usize> = self
                    .x
                    .row_iter()
                    .enumerate()
                    .filter(|(_, row)| row.transpose().dot(w) >= 0.0)
                    .map(|(i, _)| i)
                    .collect();
                let mut acc = 0.0;
                for &i in &active {
                    for &j in &active {
                        acc += g[(i, j)];
                    }
                }
                acc.max(0.0)
            }
            None => {
                let phi = phi_matrix(self.family, w, &self.x);
                let p = &self.inverse * &phi;
                phi.component_mul(&p).sum().max(0.0)
            }
        }
    }

    fn envelope(&self) -> f64 {
        self.envelope
    }

    fn normalizer(&self) -> f64 {
        self.s_lambda
    }
}

/// Result of a rejection-sampling run.
#[derive(Debug, Clone)]
pub struct ImportanceDraw {
    pub samples: Vec<FeatureSample>,
    pub proposals: u64,
}

pub const MAX_PROPOSALS_PER_SAMPLE: u64 = 1_000_000;

pub fn sample_importance_features<D: ImportanceDensity + ?Sized>(
    density: &D,
    m: usize,
    d: usize,
    seed: SeedStream,
) -> Result<ImportanceDraw> {
    let mut rng = seed.rng();
    let envelope = density.envelope();
    let normalizer = density.normalizer();
    let budget = MAX_PROPOSALS_PER_SAMPLE.saturating_mul(m as u64);
    let mut samples = Vec::with_capacity(m);
    let mut proposals = 0u64;
    while samples.len() < m {
        if proposals >= budget {
            return Err(Error::SamplerExhausted {
                proposals,
                accepted: samples.len(),
            });
        }
        proposals += 1;
        let w = gaussian_vector(d, &mut rng);
        let ratio = density.ratio(&w);
        let u: f64 = rng.random();
        if u * envelope < ratio {
            samples.push(FeatureSample {
                w,
                weight: (normalizer / ratio).sqrt(),
                lev_ratio: Some(ratio),
            });
        }
    }
    Ok(ImportanceDraw { samples, proposals })
}

/// Draws `m` feature weights from the ridge leverage distribution of `reg`.
pub fn sample_leverage_features(
    family: FeatureFamily,
    m: usize,
    x: &DMatrix<f64>,
    reg: &RegularizedKernel,
    seed: SeedStream,
) -> Result<Vec<FeatureSample>> {
    let density = LeverageDensity::new(family, x, reg)?;
    Ok(sample_importance_features(&density, m, x.ncols(), seed)?.samples)
}

/// `Ψ̄` (`n × m·d2`) together with the samples that produced it.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub psi_bar: DMatrix<f64>,
    pub samples: Vec<FeatureSample>,
    pub family: FeatureFamily,
}

impl FeatureMatrix {
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn gram(&self) -> KernelMatrix {
        let g = &self.psi_bar * self.psi_bar.transpose();
        KernelMatrix::symmetrized(g, KernelKind::FeatureGram)
            .expect("Gram of a real matrix is symmetric")
    }

    /// Features of a single new point, laid out like a row of `Ψ̄`.
    pub fn feature_row(&self, z: &DVector<f64>) -> DVector<f64> {
        let d2 = self.family.d2(z.len());
        let scale = 1.0 / (self.m() as f64).sqrt();
        let mut out = DVector::zeros(self.m() * d2);
        for (r, s) in self.samples.iter().enumerate() {
            let block = phi(self.family, z, &s.w);
            for k in 0..d2 {
                out[r * d2 + k] = scale * s.weight * block[k];
            }
        }
        out
    }
}

/// Row `i`, block `r` of `Ψ̄` is `(1/√m)·weight_r·φ(x_i, w_r)`.
pub fn build_feature_matrix(
    x: &DMatrix<f64>,
    samples: &[FeatureSample],
    family: FeatureFamily,
) -> Result<FeatureMatrix> {
    if samples.is_empty() {
        return Err(Error::Domain(
            "feature matrix needs at least one sample".into(),
        ));
    }
    let (n, d) = x.shape();
    let d2 = family.d2(d);
    for s in samples {
        if s.w.len() != d {
            return Err(Error::DimensionMismatch {
                context: "feature sample",
                expected: d,
                found: s.w.len(),
            });
        }
    }
    let m = samples.len();
    let scale = 1.0 / (m as f64).sqrt();
    let mut psi = DMatrix::zeros(n, m * d2);
    let mut buf = vec![0.0; d2];
    for (r, s) in samples.iter().enumerate() {
        for (i, row) in x.row_iter().enumerate() {
            family.write_phi(row.iter(), &s.w, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                psi[(i, r * d2 + k)] = scale * s.weight * v;
            }
        }
    }
    Ok(FeatureMatrix {
        psi_bar: psi,
        samples: samples.to_vec(),
        family,
    })
}

/// Smallest `m` with `m ≥ 3ε⁻² s_q̃ ln(16 s_q̃ s_λ / δ)`.
pub fn required_m(eps: f64, delta: f64, s_qtilde: f64, s_lambda: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::config("eps", format!("{eps} is outside (0, 1/2)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("delta", format!("{delta} is outside (0, 1)")));
    }
    if !(s_qtilde >= 0.0 && s_lambda >= 0.0) {
        return Err(Error::Domain(
            "statistical dimensions must be nonnegative".into(),
        ));
    }
    if s_qtilde == 0.0 {
        return Ok(0);
    }
    let bound = 3.0 / (eps * eps) * s_qtilde * (16.0 * s_qtilde * s_lambda / delta).ln();
    Ok(bound.max(0.0).ceil() as usize)
}

pub fn write_samples_csv(path: impl AsRef<Path>, samples: &[FeatureSample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.w.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d).map(|j| format!("w_{j}")).collect();
    header.push("weight".into());
    header.push("lev_ratio".into());
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.w.iter().map(|v| fmt_f64(*v)).collect();
        rec.push(fmt_f64(s.weight));
        rec.push(s.lev_ratio.map(fmt_f64).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len().saturating_sub(2);
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Domain(format!("bad number `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let w = rec.iter().take(d).map(parse).collect::<Result<Vec<_>>>()?;
        let weight = parse(&rec[d])?;
        let lev_ratio = match rec[d + 1].trim() {
            "" => None,
            s => Some(parse(s)?),
        };
        out.push(FeatureSample {
            w: DVector::from_vec(w),
            weight,
            lev_ratio,
        });
    }
    Ok(out)
}
