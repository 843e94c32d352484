//! Two-layer ReLU network `u = (κ/√m) Σ_r a_r ρ_r relu(w_rᵀx)` trained on the
//! first layer by gradient descent on `½‖Y − u‖² + ½λ‖W‖²_F`.
//!
//! The second layer `a` and the importance weights `ρ` are frozen at
//! initialization. With Gaussian initialization every `ρ_r` is 1.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{check_unit_rows, check_unit_vector, fmt_f64};
use crate::error::{Error, Result};
use crate::features::{gaussian_vector, sample_leverage_features, FeatureFamily};
use crate::kernels::{symmetric_spectral_norm, KernelKind, KernelMatrix, RegularizedKernel};
use crate::rng::SeedStream;

/// Gradient descent refuses step sizes with `η(κ²‖H(0)‖ + λ)` at or above this.
pub const STABILITY_LIMIT: f64 = 0.5;
/// Training aborts once the loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    /// `d × m`; column `r` is `w_r`.
    pub w: DMatrix<f64>,
    w0: DMatrix<f64>,
    pub a: DVector<f64>,
    pub rho: DVector<f64>,
    /// Leverage ratio of each initial weight, when leverage-initialized.
    pub lev_ratio: Option<DVector<f64>>,
    pub kappa: f64,
    pub lambda: f64,
}

fn random_signs<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(
        m,
        (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }),
    )
}

impl TwoLayerNet {
    /// Assembles a network from explicit parameters; `W` becomes the frozen
    /// initialization.
    pub fn from_parts(
        w: DMatrix<f64>,
        a: DVector<f64>,
        rho: DVector<f64>,
        kappa: f64,
        lambda: f64,
    ) -> Result<Self> {
        let m = w.ncols();
        for (what, len) in [
            ("second-layer signs", a.len()),
            ("importance weights", rho.len()),
        ] {
            if len != m {
                return Err(Error::Domain(format!(
                    "{what}: expected {m} entries, found {len}"
                )));
            }
        }
        if a.iter().any(|v| *v != 1.0 && *v != -1.0) {
            return Err(Error::Domain("second-layer signs must be ±1".into()));
        }
        if rho.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("importance weights must be positive".into()));
        }
        Ok(Self {
            w0: w.clone(),
            w,
            a,
            rho,
            lev_ratio: None,
            kappa,
            lambda,
        })
    }

    pub fn w0(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn m(&self) -> usize {
        self.w.ncols()
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    fn output_scale(&self) -> f64 {
        self.kappa / (self.m() as f64).sqrt()
    }

    fn check_inputs(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.d() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.d(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// `f(W, x) = (1/√m) Σ_r a_r ρ_r relu(w_rᵀx)`, without the multiplier.
    pub fn f(&self, x: &DVector<f64>) -> f64 {
        let pre = self.w.tr_mul(x);
        let s: f64 = (0..self.m())
            .map(|r| self.a[r] * self.rho[r] * pre[r].max(0.0))
            .sum();
        s / (self.m() as f64).sqrt()
    }

    /// `max_r ‖w_r − w_r(0)‖₂`.
    pub fn max_weight_drift(&self) -> f64 {
        (&self.w - &self.w0)
            .column_iter()
            .fold(0.0_f64, |acc, c| acc.max(c.norm()))
    }

    /// `W(0)` as `weights.csv` (`d` rows of `m` values) and `a`, `ρ` and
    /// the leverage ratios as the columns of `neurons.csv`; the current `W`
    /// goes to `weights_current.csv` when it differs from `W(0)`.
    pub fn write_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_matrix(dir.join("weights.csv"), &self.w0)?;
        if self.w != self.w0 {
            write_matrix(dir.join("weights_current.csv"), &self.w)?;
        }
        let mut w = csv::Writer::from_path(dir.join("neurons.csv"))?;
        w.write_record(["a", "rho", "lev_ratio"])?;
        for r in 0..self.m() {
            let lev = self
                .lev_ratio
                .as_ref()
                .map(|l| fmt_f64(l[r]))
                .unwrap_or_default();
            w.write_record([fmt_f64(self.a[r]), fmt_f64(self.rho[r]), lev])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Gaussian first layer, uniform random signs, `ρ = 1`.
pub fn init_gaussian(
    m: usize,
    d: usize,
    kappa: f64,
    lambda: f64,
    seed: SeedStream,
) -> Result<TwoLayerNet> {
    if m < 1 {
        return Err(Error::config("m", "must be positive"));
    }
    let mut wrng = seed.child(0).rng();
    let mut w = DMatrix::zeros(d, m);
    for r in 0..m {
        w.set_column(r, &gaussian_vector(d, &mut wrng));
    }
    let a = random_signs(m, &mut seed.child(1).rng());
    TwoLayerNet::from_parts(w, a, DVector::from_element(m, 1.0), kappa, lambda)
}

/// First layer drawn from the ridge leverage distribution of the ReLU NTK,
/// with `ρ_r = √(p/q)(w_r(0))` frozen. Signs use the same stream as
/// [`init_gaussian`].
pub fn init_leverage(
    m: usize,
    x: &DMatrix<f64>,
    reg: &RegularizedKernel,
    kappa: f64,
    lambda: f64,
    seed: SeedStream,
) -> Result<TwoLayerNet> {
    if m < 1 {
        return Err(Error::config("m", "must be positive"));
    }
    let samples = sample_leverage_features(FeatureFamily::ReluNtk, m, x, reg, seed.child(0))?;
    let d = x.ncols();
    let mut w = DMatrix::zeros(d, m);
    for (r, s) in samples.iter().enumerate() {
        w.set_column(r, &s.w);
    }
    let rho = DVector::from_iterator(m, samples.iter().map(|s| s.weight));
    let lev = DVector::from_iterator(m, samples.iter().map(|s| s.lev_ratio.unwrap_or(f64::NAN)));
    let a = random_signs(m, &mut seed.child(1).rng());
    let mut net = TwoLayerNet::from_parts(w, a, rho, kappa, lambda)?;
    net.lev_ratio = Some(lev);
    Ok(net)
}

/// Preactivations `X W` (`n × m`).
fn preactivations(net: &TwoLayerNet, x: &DMatrix<f64>) -> DMatrix<f64> {
    x * &net.w
}

pub fn forward(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    net.check_inputs(x)?;
    Ok(forward_from(net, &preactivations(net, x)))
}

fn forward_from(net: &TwoLayerNet, pre: &DMatrix<f64>) -> DVector<f64> {
    let scale = net.output_scale();
    let coef: Vec<f64> = (0..net.m()).map(|r| net.a[r] * net.rho[r]).collect();
    DVector::from_iterator(
        pre.nrows(),
        (0..pre.nrows()).map(|i| {
            let s: f64 = pre
                .row(i)
                .iter()
                .zip(&coef)
                .map(|(p, c)| c * p.max(0.0))
                .sum();
            scale * s
        }),
    )
}

/// Network output at a single unit-norm point.
pub fn forward_test(net: &TwoLayerNet, x_test: &DVector<f64>) -> Result<f64> {
    check_unit_vector(x_test, "test point")?;
    if x_test.len() != net.d() {
        return Err(Error::DimensionMismatch {
            context: "test point",
            expected: net.d(),
            found: x_test.len(),
        });
    }
    Ok(net.kappa * net.f(x_test))
}

pub fn loss(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let u = forward(net, x)?;
    Ok(loss_from(net, &u, y))
}

fn loss_from(net: &TwoLayerNet, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
    0.5 * (y - u).norm_squared() + 0.5 * net.lambda * net.w.norm_squared()
}

/// Gradient of the regularized loss with respect to `W` (`d × m`). The ReLU
/// derivative at zero is taken as 1.
pub fn gradient(net: &TwoLayerNet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    net.check_inputs(x)?;
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let pre = preactivations(net, x);
    let u = forward_from(net, &pre);
    Ok(gradient_from(net, x, &pre, &(y - u)))
}

fn gradient_from(
    net: &TwoLayerNet,
    x: &DMatrix<f64>,
    pre: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> DMatrix<f64> {
    let scale = net.output_scale();
    let (n, m) = pre.shape();
    let masked = DMatrix::from_fn(
        n,
        m,
        |i, r| if pre[(i, r)] >= 0.0 { residual[i] } else { 0.0 },
    );
    let mut g = x.tr_mul(&masked);
    for r in 0..m {
        let c = -scale * net.a[r] * net.rho[r];
        g.column_mut(r).scale_mut(c);
    }
    g + &net.w * net.lambda
}

/// Rows scaled by `ρ_r` on the active set: `S_ir = ρ_r·1{w_rᵀx_i ≥ 0}`.
fn activation_pattern(net: &TwoLayerNet, pre: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(pre.nrows(), pre.ncols(), |i, r| {
        if pre[(i, r)] >= 0.0 {
            net.rho[r]
        } else {
            0.0
        }
    })
}

/// `H_ij = (1/m) Σ_r ρ_r² x_iᵀx_j 1{w_rᵀx_i ≥ 0} 1{w_rᵀx_j ≥ 0}`.
pub fn dynamic_kernel(net: &TwoLayerNet, x: &DMatrix<f64>) -> Result<KernelMatrix> {
    net.check_inputs(x)?;
    Ok(dynamic_kernel_from(net, x, &preactivations(net, x)))
}

fn dynamic_kernel_from(net: &TwoLayerNet, x: &DMatrix<f64>, pre: &DMatrix<f64>) -> KernelMatrix {
    let s = activation_pattern(net, pre);
    let counts = &s * s.transpose() / net.m() as f64;
    let h = (x * x.transpose()).component_mul(&counts);
    KernelMatrix::symmetrized(h, KernelKind::NtkEmpirical).expect("dynamic kernel is symmetric")
}

/// Entry `i` is `(1/m) Σ_r ρ_r² x_testᵀx_i 1{w_rᵀx_test ≥ 0} 1{w_rᵀx_i ≥ 0}`.
pub fn dynamic_kernel_test_vec(
    net: &TwoLayerNet,
    x_test: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_unit_vector(x_test, "test point")?;
    net.check_inputs(x)?;
    Ok(test_vec_from(net, x_test, x, &preactivations(net, x)))
}

fn test_vec_from(
    net: &TwoLayerNet,
    x_test: &DVector<f64>,
    x: &DMatrix<f64>,
    pre: &DMatrix<f64>,
) -> DVector<f64> {
    let pt = net.w.tr_mul(x_test);
    let m = net.m();
    DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| {
            let c: f64 = (0..m)
                .filter(|&r| pt[r] >= 0.0 && pre[(i, r)] >= 0.0)
                .map(|r| net.rho[r] * net.rho[r])
                .sum();
            c / m as f64 * x.row(i).dot(&x_test.transpose())
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homogeneity {
    /// `⟨∂f/∂W, W⟩`.
    pub lhs: f64,
    /// `f(W, x)`.
    pub rhs: f64,
}

/// Compares `⟨∂f/∂W, W⟩` with `f(W, x)`. If a preactivation is exactly zero,
/// `x` is nudged by `1e-9` in its first coordinate until none is.
pub fn homogeneity_check(net: &TwoLayerNet, x: &DVector<f64>) -> Homogeneity {
    let mut x = x.clone();
    while net.w.tr_mul(&x).iter().any(|p| *p == 0.0) && net.w.iter().any(|v| *v != 0.0) {
        x[0] += 1e-9;
    }
    let pre = net.w.tr_mul(&x);
    let inv = 1.0 / (net.m() as f64).sqrt();
    let mut lhs = 0.0;
    for r in 0..net.m() {
        if pre[r] >= 0.0 {
            // ∂f/∂w_r = (1/√m) a_r ρ_r x 1{w_rᵀx ≥ 0}
            let grad_r = &x * (inv * net.a[r] * net.rho[r]);
            lhs += grad_r.dot(&net.w.column(r));
        }
    }
    Homogeneity {
        lhs,
        rhs: net.f(&x),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub eta: f64,
    pub steps: usize,
    pub diag_every: usize,
    pub u_star: Option<DVector<f64>>,
    pub x_test: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// `step·η`.
    pub t: f64,
    pub u_nn: DVector<f64>,
    pub u_test: Option<f64>,
    pub loss: f64,
    pub max_weight_drift: f64,
    /// `‖H(t) − H(0)‖_F`.
    pub kernel_drift: f64,
    /// `‖u_nn − u*‖₂` when `u*` was supplied.
    pub train_gap: Option<f64>,
    /// `H(t)` itself.
    pub kernel: DMatrix<f64>,
    /// `k_t(x_test, X)` when a test point was supplied.
    pub test_kernel_vec: Option<DVector<f64>>,
}

/// `η(κ²‖H(0)‖ + λ)` for the network's current weights.
pub fn stability_number(net: &TwoLayerNet, x: &DMatrix<f64>, eta: f64) -> Result<f64> {
    let h = dynamic_kernel(net, x)?;
    Ok(eta * (net.kappa * net.kappa * h.spectral_norm() + net.lambda))
}

/// Runs `steps` gradient-descent updates, recording the state at step 0,
/// every `diag_every` steps and at the final step.
pub fn train(
    net: &mut TwoLayerNet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opts: &TrainOptions,
) -> Result<Vec<TrainRecord>> {
    net.check_inputs(x)?;
    check_unit_rows(x, "input")?;
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if !(opts.eta > 0.0 && opts.eta.is_finite()) {
        return Err(Error::config("eta", "must be positive"));
    }
    if opts.diag_every < 1 {
        return Err(Error::config("diag_every", "must be positive"));
    }
    if let Some(xt) = &opts.x_test {
        check_unit_vector(xt, "test point")?;
    }
    let pre0 = preactivations(net, x);
    let h0 = dynamic_kernel_from(net, x, &pre0);
    let stab =
        opts.eta * (net.kappa * net.kappa * symmetric_spectral_norm(h0.values()) + net.lambda);
    if stab >= STABILITY_LIMIT {
        return Err(Error::config(
            "eta",
            format!("η(κ²‖H(0)‖ + λ) = {stab:.4} must stay below {STABILITY_LIMIT}"),
        ));
    }

    let snapshot =
        |net: &TwoLayerNet, step: usize, pre: &DMatrix<f64>, u: &DVector<f64>, loss: f64| {
            let h = dynamic_kernel_from(net, x, pre);
            TrainRecord {
                step,
                t: step as f64 * opts.eta,
                u_nn: u.clone(),
                u_test: opts.x_test.as_ref().map(|xt| net.kappa * net.f(xt)),
                loss,
                max_weight_drift: net.max_weight_drift(),
                kernel_drift: (h.values() - h0.values()).norm(),
                train_gap: opts.u_star.as_ref().map(|s| (u - s).norm()),
                test_kernel_vec: opts
                    .x_test
                    .as_ref()
                    .map(|xt| test_vec_from(net, xt, x, pre)),
                kernel: h.into_values(),
            }
        };

    let u0 = forward_from(net, &pre0);
    let loss0 = loss_from(net, &u0, y);
    let limit = DIVERGENCE_FACTOR * loss0.max(f64::MIN_POSITIVE);
    let mut records = vec![snapshot(net, 0, &pre0, &u0, loss0)];
    let mut pre = pre0;
    let mut u = u0;
    for step in 1..=opts.steps {
        let g = gradient_from(net, x, &pre, &(y - &u));
        net.w -= g * opts.eta;
        pre = preactivations(net, x);
        u = forward_from(net, &pre);
        let l = loss_from(net, &u, y);
        if !(l <= limit) {
            return Err(Error::Diverged {
                step,
                loss: l,
                limit,
            });
        }
        if step % opts.diag_every == 0 || step == opts.steps {
            records.push(snapshot(net, step, &pre, &u, l));
        }
    }
    Ok(records)
}

/// Columns `step, t, loss, max_weight_drift, kernel_drift, train_gap, u_test`;
/// optional fields are left empty when absent.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "t",
        "loss",
        "max_weight_drift",
        "kernel_drift",
        "train_gap",
        "u_test",
    ])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            fmt_f64(r.t),
            fmt_f64(r.loss),
            fmt_f64(r.max_weight_drift),
            fmt_f64(r.kernel_drift),
            r.train_gap.map(fmt_f64).unwrap_or_default(),
            r.u_test.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs of the lazy-training drift budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftInputs {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub lambda0: f64,
    pub delta: f64,
    /// `‖u_nn(0) − u*‖₂`.
    pub init_gap: f64,
    /// `‖Y − u*‖₂`.
    pub label_gap: f64,
    pub eps_train: f64,
    pub horizon: f64,
}

/// Per-neuron weight drift allowed over the horizon, with the kernel and
/// test-vector drifts it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftBudget {
    pub eps_w: f64,
    /// `2n·ε_W`, bounds `‖H(t) − H(0)‖`.
    pub eps_h: f64,
    /// `2√n·ε_W`, bounds `‖k_t − k_0‖₂`.
    pub eps_k: f64,
}

/// ```text
/// ε_W = √(n/m)·max{4‖u(0) − u*‖/(κ²Λ₀ + λ), ε_train·T}
///     + (√(n/m)‖Y − u*‖ + λ(2√d + 2√ln(m/δ)))·T
/// ```
pub fn drift_budget(p: &DriftInputs) -> DriftBudget {
    let ratio = (p.n as f64 / p.m as f64).sqrt();
    let rate = p.kappa * p.kappa * p.lambda0 + p.lambda;
    let head = ratio * (4.0 * p.init_gap / rate).max(p.eps_train * p.horizon);
    let norm_growth = 2.0 * (p.d as f64).sqrt() + 2.0 * (p.m as f64 / p.delta).ln().max(0.0).sqrt();
    let eps_w = head + (ratio * p.label_gap + p.lambda * norm_growth) * p.horizon;
    DriftBudget {
        eps_w,
        eps_h: 2.0 * p.n as f64 * eps_w,
        eps_k: 2.0 * (p.n as f64).sqrt() * eps_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, sample_unit_sphere};
    use crate::kernels::{ntk_gram, RegularizedKernel};
    use approx::assert_abs_diff_eq;

    fn small_problem(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let ds = generate_dataset(n, d, SeedStream::new(seed, 0), 0.05).unwrap();
        (ds.x, ds.y)
    }

    fn single_neuron(w: &[f64], kappa: f64) -> TwoLayerNet {
        TwoLayerNet::from_parts(
            DMatrix::from_column_slice(w.len(), 1, w),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            kappa,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_init_statistics() {
        let a = init_gaussian(2500, 4, 1.0, 0.0, SeedStream::new(1, 2)).unwrap();
        let b = init_gaussian(2500, 4, 1.0, 0.0, SeedStream::new(1, 2)).unwrap();
        assert_eq!(a, b);
        let mean_sq = a.w.column_iter().map(|c| c.norm_squared()).sum::<f64>() / (2500.0 * 4.0);
        assert!((0.9..=1.1).contains(&mean_sq), "{mean_sq}");
        assert!(a.rho.iter().all(|v| *v == 1.0));
        assert_eq!(a.w0(), &a.w);

        let mut total = 0.0;
        for s in 0..20 {
            let net = init_gaussian(400, 3, 1.0, 0.0, SeedStream::new(s, 9)).unwrap();
            total += net.a.sum().abs() / 400.0;
        }
        assert!(total / 20.0 <= 4.0 / 20.0);
    }

    #[test]
    fn forward_cases() {
        let x = DMatrix::from_row_slice(1, 2, &[0.6, 0.8]);
        let net = single_neuron(&[1.0, 0.5], 0.3);
        assert_abs_diff_eq!(forward(&net, &x).unwrap()[0], 0.3 * 1.0, epsilon = 1e-15);
        let net = single_neuron(&[-1.0, -0.5], 0.3);
        assert_eq!(forward(&net, &x).unwrap()[0], 0.0);

        let (x, _) = small_problem(5, 3, 3);
        let mut net = init_gaussian(50, 3, 0.7, 0.0, SeedStream::new(3, 1)).unwrap();
        let u = forward(&net, &x).unwrap();
        net.w *= 2.5;
        assert!((forward(&net, &x).unwrap() - u * 2.5).amax() < 1e-12);

        let xt = x.row(1).transpose();
        assert_abs_diff_eq!(
            forward_test(&net, &xt).unwrap(),
            forward(&net, &x).unwrap()[1],
            epsilon = 1e-14
        );
        assert!(forward_test(&net, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn gradient_special_cases() {
        let (x, _) = small_problem(4, 3, 4);
        let mut net = init_gaussian(30, 3, 1.0, 0.0, SeedStream::new(4, 1)).unwrap();
        let u = forward(&net, &x).unwrap();
        assert_eq!(gradient(&net, &x, &u).unwrap().amax(), 0.0);
        net.lambda = 1e3;
        let g = gradient(&net, &x, &u).unwrap();
        assert_eq!(g, &net.w * 1e3);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (x, y) = small_problem(5, 3, 5);
        let mut net = init_gaussian(12, 3, 0.9, 0.2, SeedStream::new(5, 1)).unwrap();
        net.rho = DVector::from_iterator(12, (0..12).map(|r| 0.5 + 0.1 * r as f64));
        let g = gradient(&net, &x, &y).unwrap();
        let pre = &x * &net.w;
        let h = 1e-5;
        for r in 0..12 {
            if pre.column(r).iter().any(|p| p.abs() <= 1e-3) {
                continue;
            }
            for k in 0..3 {
                let mut plus = net.clone();
                plus.w[(k, r)] += h;
                let mut minus = net.clone();
                minus.w[(k, r)] -= h;
                let fd = (loss(&plus, &x, &y).unwrap() - loss(&minus, &x, &y).unwrap()) / (2.0 * h);
                let rel = (fd - g[(k, r)]).abs() / g[(k, r)].abs().max(1e-6);
                assert!(rel <= 1e-5, "r={r} k={k}: {fd} vs {}", g[(k, r)]);
            }
        }
    }

    #[test]
    fn dynamic_kernel_cases() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]);
        let net = single_neuron(&[1.0, 1.0], 1.0);
        let h = dynamic_kernel(&net, &x).unwrap();
        assert!((h.values() - &x * x.transpose()).amax() < 1e-15);
        let xt = DVector::from_vec(vec![0.6, 0.8]);
        let kv = dynamic_kernel_test_vec(&net, &xt, &x).unwrap();
        assert_abs_diff_eq!(kv[1], h.values()[(1, 1)], epsilon = 1e-15);

        let dead = single_neuron(&[-1.0, -1.0], 1.0);
        assert_eq!(dynamic_kernel(&dead, &x).unwrap().values().amax(), 0.0);
        assert_eq!(dynamic_kernel_test_vec(&dead, &xt, &x).unwrap().amax(), 0.0);
    }

    #[test]
    fn dynamic_kernel_entries_bounded_by_largest_weight() {
        let (x, _) = small_problem(6, 3, 6);
        let mut net = init_gaussian(40, 3, 1.0, 0.0, SeedStream::new(6, 1)).unwrap();
        net.rho = DVector::from_iterator(40, (0..40).map(|r| 0.2 + 0.05 * r as f64));
        let bound = net.rho.amax().powi(2);
        assert!(dynamic_kernel(&net, &x).unwrap().values().amax() <= bound);
    }

    #[test]
    fn homogeneity_holds() {
        let mut rng = SeedStream::new(7, 0).rng();
        for s in 0..20 {
            let net = init_gaussian(25, 4, 1.0, 0.0, SeedStream::new(s, 3)).unwrap();
            let x = sample_unit_sphere(4, &mut rng);
            let h = homogeneity_check(&net, &x);
            assert!((h.lhs - h.rhs).abs() <= 1e-10 * (1.0 + h.rhs.abs()));
        }
        let zero = TwoLayerNet::from_parts(
            DMatrix::zeros(3, 4),
            DVector::from_element(4, 1.0),
            DVector::from_element(4, 1.0),
            1.0,
            0.0,
        )
        .unwrap();
        let h = homogeneity_check(&zero, &DVector::from_vec(vec![1.0, 0.0, 0.0]));
        assert_eq!((h.lhs, h.rhs), (0.0, 0.0));
    }

    #[test]
    fn training_steps_and_records() {
        let (x, y) = small_problem(6, 3, 8);
        let mut net = init_gaussian(200, 3, 1.0, 0.0, SeedStream::new(8, 1)).unwrap();
        let w_init = net.w.clone();
        let opts = TrainOptions {
            eta: 0.05,
            steps: 0,
            diag_every: 10,
            u_star: None,
            x_test: None,
        };
        let recs = train(&mut net, &x, &y, &opts).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(net.w, w_init);

        let opts = TrainOptions { steps: 1, ..opts };
        let recs = train(&mut net, &x, &y, &opts).unwrap();
        assert!(recs[1].loss < recs[0].loss);

        let mut net = init_gaussian(200, 3, 1.0, 0.01, SeedStream::new(8, 1)).unwrap();
        let opts = TrainOptions {
            eta: 0.1,
            steps: 25,
            diag_every: 10,
            u_star: Some(DVector::zeros(6)),
            x_test: Some(x.row(0).transpose()),
        };
        let recs = train(&mut net, &x, &y, &opts).unwrap();
        let steps: Vec<usize> = recs.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert_eq!(net.w0(), &w_init);
        assert_eq!(recs[0].kernel_drift, 0.0);
        assert!(recs
            .iter()
            .all(|r| r.max_weight_drift >= 0.0 && r.train_gap.is_some()));
        assert_abs_diff_eq!(recs[3].t, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(recs[3].u_test.unwrap(), recs[3].u_nn[0], epsilon = 1e-12);
    }

    #[test]
    fn unstable_step_rejected() {
        let (x, y) = small_problem(6, 3, 9);
        let mut net = init_gaussian(100, 3, 1.0, 0.0, SeedStream::new(9, 1)).unwrap();
        let opts = TrainOptions {
            eta: 10.0,
            steps: 5,
            diag_every: 1,
            u_star: None,
            x_test: None,
        };
        assert!(train(&mut net, &x, &y, &opts)
            .unwrap_err()
            .is_configuration());
    }

    #[test]
    fn leverage_init_weights_are_consistent() {
        let (x, _) = small_problem(6, 3, 10);
        let k = ntk_gram(&x).unwrap();
        let reg = RegularizedKernel::new(k, 0.05).unwrap();
        let s = reg.statistical_dimension();
        let net = init_leverage(64, &x, &reg, 1.0, 0.0, SeedStream::new(10, 0)).unwrap();
        let lev = net.lev_ratio.as_ref().unwrap();
        for r in 0..64 {
            assert_abs_diff_eq!(net.rho[r] * net.rho[r] * lev[r], s, epsilon = 1e-10);
        }
        let g = init_gaussian(64, 3, 1.0, 0.0, SeedStream::new(10, 0)).unwrap();
        assert_eq!(g.a, net.a);
    }

    #[test]
    fn drift_budget_formula() {
        let p = DriftInputs {
            n: 4,
            m: 100,
            d: 9,
            kappa: 1.0,
            lambda: 0.5,
            lambda0: 1.5,
            delta: 0.1,
            init_gap: 2.0,
            label_gap: 1.0,
            eps_train: 0.1,
            horizon: 3.0,
        };
        let b = drift_budget(&p);
        // √(n/m) = 0.2; max{4·2/2, 0.3} = 4; λ(2·3 + 2√ln 1000)
        let expected = 0.2 * 4.0 + (0.2 + 0.5 * (6.0 + 2.0 * 1000f64.ln().sqrt())) * 3.0;
        assert_abs_diff_eq!(b.eps_w, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(b.eps_h, 8.0 * expected, epsilon = 1e-12);
        assert_abs_diff_eq!(b.eps_k, 4.0 * expected, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_files() {
        let (x, _) = small_problem(4, 3, 11);
        let k = ntk_gram(&x).unwrap();
        let reg = RegularizedKernel::new(k, 0.1).unwrap();
        let net = init_leverage(5, &x, &reg, 1.0, 0.0, SeedStream::new(11, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.write_checkpoint(dir.path()).unwrap();
        let weights = std::fs::read_to_string(dir.path().join("weights.csv")).unwrap();
        assert_eq!(weights.lines().count(), 3);
        assert_eq!(weights.lines().next().unwrap().split(',').count(), 5);
        let neurons = std::fs::read_to_string(dir.path().join("neurons.csv")).unwrap();
        assert_eq!(neurons.lines().next().unwrap(), "a,rho,lev_ratio");
        assert!(!dir.path().join("weights_current.csv").exists());
    }
}
