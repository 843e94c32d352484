//! Kernel ridge regression: dual and primal solvers, and the gradient flow
//! `du/dt = κ²K(Y − u) − λu` started from `u(0) = 0`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::kernels::KernelMatrix;

/// Largest `dt·(κ²‖K‖ + λ)` accepted by [`krr_flow_integrated`].
pub const RK4_STABILITY_LIMIT: f64 = 0.1;

/// A squared Cholesky pivot below this fraction of the largest one marks the
/// system as singular.
const PIVOT_REL_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct KrrSolution {
    /// Solves `(κ²K + λI)α = κY`.
    pub alpha: DVector<f64>,
    /// `κ²K(κ²K + λI)⁻¹Y`.
    pub u_star: DVector<f64>,
    pub u_test_star: Option<f64>,
    pub kappa: f64,
    pub lambda: f64,
    factor: Cholesky<f64, Dyn>,
}

impl KrrSolution {
    /// Attaches the test prediction for kernel vector `k_vec`.
    pub fn with_test(mut self, k_vec: &DVector<f64>) -> Result<Self> {
        self.u_test_star = Some(predict_test(k_vec, &self)?);
        Ok(self)
    }

    /// `(κ²K + λI)⁻¹b` through the cached factorization.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }
}

fn spd_factor(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(a)
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(min * min > PIVOT_REL_TOL * max * max) {
        return Err(Error::Singular(format!(
            "{what} is numerically rank deficient"
        )));
    }
    Ok(chol)
}

pub fn solve_krr_dual(
    k: &KernelMatrix,
    y: &DVector<f64>,
    lambda: f64,
    kappa: f64,
) -> Result<KrrSolution> {
    let n = k.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: n,
            found: y.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let kappa2 = kappa * kappa;
    let system = k.values() * kappa2 + DMatrix::identity(n, n) * lambda;
    let factor = spd_factor(system, "κ²K + λI")?;
    let alpha = factor.solve(&(y * kappa));
    let u_star = k.values() * &alpha * kappa;
    Ok(KrrSolution {
        alpha,
        u_star,
        u_test_star: None,
        kappa,
        lambda,
        factor,
    })
}

/// `κ²·k_vecᵀ(κ²K + λI)⁻¹Y`.
pub fn predict_test(k_vec: &DVector<f64>, sol: &KrrSolution) -> Result<f64> {
    if k_vec.len() != sol.alpha.len() {
        return Err(Error::DimensionMismatch {
            context: "test kernel vector",
            expected: sol.alpha.len(),
            found: k_vec.len(),
        });
    }
    Ok(sol.kappa * k_vec.dot(&sol.alpha))
}

/// Ridge regression in feature space.
#[derive(Debug, Clone)]
pub struct PrimalKrr {
    pub weights: DVector<f64>,
    pub u_hat: DVector<f64>,
}

impl PrimalKrr {
    pub fn predict(&self, feature_row: &DVector<f64>) -> f64 {
        feature_row.dot(&self.weights)
    }
}

/// Solves `(Ψ̄ᵀΨ̄ + λI)w = Ψ̄ᵀY` and returns `w` with `û = Ψ̄w`.
pub fn solve_krr_primal(psi: &FeatureMatrix, y: &DVector<f64>, lambda: f64) -> Result<PrimalKrr> {
    solve_krr_primal_dense(&psi.psi_bar, y, lambda)
}

pub fn solve_krr_primal_dense(
    psi: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<PrimalKrr> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "primal ridge needs lambda > 0, got {lambda}"
        )));
    }
    if y.len() != psi.nrows() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: psi.nrows(),
            found: y.len(),
        });
    }
    let s = psi.ncols();
    let system = psi.tr_mul(psi) + DMatrix::identity(s, s) * lambda;
    let factor = spd_factor(system, "Ψ̄ᵀΨ̄ + λI")?;
    let weights = factor.solve(&psi.tr_mul(y));
    let u_hat = psi * &weights;
    Ok(PrimalKrr { weights, u_hat })
}

/// Predictions of the KRR gradient flow at increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct KrrTrajectory {
    pub times: Vec<f64>,
    pub u_ntk: Vec<DVector<f64>>,
    pub u_ntk_test: Vec<f64>,
}

impl KrrTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Columns `t, u_0..u_{n-1}, u_test`; `u_test` is left empty when the
    /// flow was run without a test point.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.u_ntk.first().map_or(0, |u| u.len());
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("u_{i}")));
        header.push("u_test".into());
        w.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut rec = vec![fmt_f64(*t)];
            rec.extend(self.u_ntk[k].iter().map(|v| fmt_f64(*v)));
            rec.push(
                self.u_ntk_test
                    .get(k)
                    .map(|v| fmt_f64(*v))
                    .unwrap_or_default(),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1 − e^{−rt})/r`, continuous at `r = 0`.
fn relaxation(rate: f64, t: f64) -> f64 {
    if rate.abs() * t < 1e-300 || rate == 0.0 {
        t
    } else {
        -(-rate * t).exp_m1() / rate
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.first() != Some(&0.0) {
        return Err(Error::config("times", "must start at 0"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("times", "must be strictly increasing"));
    }
    Ok(())
}

fn check_flow_inputs(
    k: &KernelMatrix,
    y: &DVector<f64>,
    k_test: Option<&DVector<f64>>,
) -> Result<()> {
    if y.len() != k.n() {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: k.n(),
            found: y.len(),
        });
    }
    if let Some(kv) = k_test {
        if kv.len() != k.n() {
            return Err(Error::DimensionMismatch {
                context: "test kernel vector",
                expected: k.n(),
                found: kv.len(),
            });
        }
    }
    Ok(())
}

/// Exact flow through the eigendecomposition `κ²K = Q diag(μ) Qᵀ`:
///
/// ```text
/// u(t)      = u* − Q diag(e^{−(μ_i+λ)t}) Qᵀ u*
/// u_test(t) = κ² k_testᵀ [ (Y − u*)(1 − e^{−λt})/λ + e^{−λt} Q diag((1 − e^{−μ_i t})/μ_i) Qᵀ u* ]
/// ```
pub fn krr_flow_closed(
    k: &KernelMatrix,
    y: &DVector<f64>,
    lambda: f64,
    kappa: f64,
    times: &[f64],
    k_test: Option<&DVector<f64>>,
) -> Result<KrrTrajectory> {
    check_flow_inputs(k, y, k_test)?;
    check_times(times)?;
    let kappa2 = kappa * kappa;
    let sol = solve_krr_dual(k, y, lambda, kappa)?;
    let eig = SymmetricEigen::new(k.values() * kappa2);
    let q = &eig.eigenvectors;
    let mu: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let u_star_eig = q.tr_mul(&sol.u_star);
    let residual = y - &sol.u_star;

    let mut traj = KrrTrajectory {
        times: times.to_vec(),
        u_ntk: Vec::with_capacity(times.len()),
        u_ntk_test: Vec::new(),
    };
    for &t in times {
        let decayed = DVector::from_iterator(
            mu.len(),
            u_star_eig
                .iter()
                .zip(&mu)
                .map(|(c, m)| c * (-(m + lambda) * t).exp()),
        );
        let u = if t == 0.0 {
            DVector::zeros(y.len())
        } else {
            &sol.u_star - q * decayed
        };
        traj.u_ntk.push(u);
        if let Some(kv) = k_test {
            let transient = DVector::from_iterator(
                mu.len(),
                u_star_eig
                    .iter()
                    .zip(&mu)
                    .map(|(c, m)| c * relaxation(*m, t)),
            );
            let inner = &residual * relaxation(lambda, t) + q * transient * (-lambda * t).exp();
            traj.u_ntk_test.push(kappa2 * kv.dot(&inner));
        }
    }
    Ok(traj)
}

/// The same flow integrated jointly with the test prediction by classical
/// fourth-order Runge-Kutta. The horizon is split into `⌈T/dt⌉` equal steps
/// and every step is recorded.
pub fn krr_flow_integrated(
    k: &KernelMatrix,
    y: &DVector<f64>,
    lambda: f64,
    kappa: f64,
    dt: f64,
    horizon: f64,
    k_test: Option<&DVector<f64>>,
) -> Result<KrrTrajectory> {
    check_flow_inputs(k, y, k_test)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::config("dt", "must be positive"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::config("horizon", "must be nonnegative"));
    }
    let kappa2 = kappa * kappa;
    let stiffness = kappa2 * k.spectral_norm() + lambda;
    if dt * stiffness >= RK4_STABILITY_LIMIT {
        return Err(Error::config(
            "dt",
            format!(
                "dt·(κ²‖K‖ + λ) = {:.4} must stay below {RK4_STABILITY_LIMIT}",
                dt * stiffness
            ),
        ));
    }
    let steps = ((horizon / dt) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 {
        0.0
    } else {
        horizon / steps as f64
    };
    let kk = k.values() * kappa2;
    let kk_y = &kk * y;
    let kt = k_test.map(|v| v * kappa2);
    let kt_y = kt.as_ref().map_or(0.0, |v| v.dot(y));

    // state derivative: (du, du_test)
    let rhs = |u: &DVector<f64>, ut: f64| -> (DVector<f64>, f64) {
        let du = &kk_y - &kk * u - u * lambda;
        let dut = kt.as_ref().map_or(0.0, |v| kt_y - v.dot(u) - lambda * ut);
        (du, dut)
    };

    let n = y.len();
    let mut u = DVector::zeros(n);
    let mut ut = 0.0;
    let mut traj = KrrTrajectory {
        times: Vec::with_capacity(steps + 1),
        u_ntk: Vec::with_capacity(steps + 1),
        u_ntk_test: Vec::new(),
    };
    traj.times.push(0.0);
    traj.u_ntk.push(u.clone());
    if k_test.is_some() {
        traj.u_ntk_test.push(0.0);
    }
    for s in 1..=steps {
        let (k1, l1) = rhs(&u, ut);
        let (k2, l2) = rhs(&(&u + &k1 * (h / 2.0)), ut + l1 * h / 2.0);
        let (k3, l3) = rhs(&(&u + &k2 * (h / 2.0)), ut + l2 * h / 2.0);
        let (k4, l4) = rhs(&(&u + &k3 * h), ut + l3 * h);
        u += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        ut += (l1 + 2.0 * l2 + 2.0 * l3 + l4) * h / 6.0;
        traj.times.push(s as f64 * h);
        traj.u_ntk.push(u.clone());
        if k_test.is_some() {
            traj.u_ntk_test.push(ut);
        }
    }
    Ok(traj)
}

/// `κ²Λ₀ + λ`, the linear convergence rate of the flow.
pub fn flow_rate(k: &KernelMatrix, lambda: f64, kappa: f64) -> f64 {
    kappa * kappa * crate::kernels::min_eigenvalue(k) + lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_feature_matrix, sample_gaussian_features, FeatureFamily};
    use crate::kernels::{ntk_gram, ntk_kernel_vec, KernelKind};
    use crate::oracle::gauss_jordan_inverse;
    use crate::{data::generate_dataset, rng::SeedStream};
    use approx::assert_abs_diff_eq;

    fn scalar_kernel() -> KernelMatrix {
        KernelMatrix::new(DMatrix::from_element(1, 1, 0.5), KernelKind::NtkExact).unwrap()
    }

    fn instance(n: usize, seed: u64) -> (crate::data::Dataset, KernelMatrix) {
        let ds = generate_dataset(n, 4, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        (ds, k)
    }

    #[test]
    fn interpolates_at_zero_ridge() {
        let (ds, k) = instance(6, 1);
        let sol = solve_krr_dual(&k, &ds.y, 0.0, 1.0).unwrap();
        assert!((&sol.u_star - &ds.y).amax() < 1e-10);
        // predicting at a training point reproduces its label
        let kv = ntk_kernel_vec(&ds.x.row(2).transpose(), &ds.x).unwrap();
        assert_abs_diff_eq!(predict_test(&kv, &sol).unwrap(), ds.y[2], epsilon = 1e-8);
    }

    #[test]
    fn scalar_and_limit_cases() {
        let y = DVector::from_element(1, 1.0);
        let sol = solve_krr_dual(&scalar_kernel(), &y, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(sol.u_star[0], 0.5, epsilon = 1e-15);

        let (ds, k) = instance(6, 2);
        let sol = solve_krr_dual(&k, &ds.y, 1e6, 0.7).unwrap();
        assert!(sol.u_star.norm() <= 0.49 * k.spectral_norm() * ds.y.norm() / 1e6);
        assert_eq!(predict_test(&DVector::zeros(6), &sol).unwrap(), 0.0);
    }

    #[test]
    fn rank_deficient_zero_ridge_is_singular() {
        let k = KernelMatrix::new(DMatrix::from_element(2, 2, 0.5), KernelKind::NtkExact).unwrap();
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let r = solve_krr_dual(&k, &y, 0.0, 1.0);
        assert!(
            matches!(r, Err(Error::Singular(_))),
            "{:?}",
            r.map(|s| s.u_star)
        );
    }

    #[test]
    fn matches_dense_inverse_and_residual_identity() {
        let (ds, k) = instance(7, 3);
        let (lambda, kappa) = (0.05, 0.6);
        let kv = ntk_kernel_vec(ds.x_test.as_ref().unwrap(), &ds.x).unwrap();
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa)
            .unwrap()
            .with_test(&kv)
            .unwrap();
        let a = k.values() * (kappa * kappa) + DMatrix::identity(7, 7) * lambda;
        let inv = gauss_jordan_inverse(&a);
        let u = k.values() * (kappa * kappa) * &inv * &ds.y;
        assert!((&u - &sol.u_star).amax() < 1e-10);
        let ut = kappa * kappa * kv.dot(&(&inv * &ds.y));
        assert_abs_diff_eq!(sol.u_test_star.unwrap(), ut, epsilon = 1e-10);
        let resid = &ds.y - &sol.u_star;
        assert!((resid - &inv * &ds.y * lambda).amax() < 1e-10);
    }

    #[test]
    fn primal_matches_dual_on_feature_gram() {
        let (ds, _) = instance(6, 4);
        let samples =
            sample_gaussian_features(FeatureFamily::ReluNtk, 20, 4, SeedStream::new(4, 1));
        let psi = build_feature_matrix(&ds.x, &samples, FeatureFamily::ReluNtk).unwrap();
        let primal = solve_krr_primal(&psi, &ds.y, 0.1).unwrap();
        let dual = solve_krr_dual(&psi.gram(), &ds.y, 0.1, 1.0).unwrap();
        assert!((&primal.u_hat - &dual.u_star).norm() <= 1e-8 * (1.0 + ds.y.norm()));
        let row = psi.feature_row(&ds.x.row(0).transpose());
        assert_abs_diff_eq!(primal.predict(&row), primal.u_hat[0], epsilon = 1e-12);

        let zero = DMatrix::zeros(6, 8);
        assert_eq!(
            solve_krr_primal_dense(&zero, &ds.y, 0.1)
                .unwrap()
                .u_hat
                .norm(),
            0.0
        );
        assert!(solve_krr_primal(&psi, &ds.y, 1e12).unwrap().u_hat.norm() < 1e-9);
        assert!(solve_krr_primal(&psi, &ds.y, 0.0).is_err());
    }

    #[test]
    fn scalar_flow_is_analytic() {
        let y = DVector::from_element(1, 1.0);
        let times: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let traj = krr_flow_closed(&scalar_kernel(), &y, 0.5, 1.0, &times, None).unwrap();
        for (t, u) in traj.times.iter().zip(&traj.u_ntk) {
            assert_abs_diff_eq!(u[0], 0.5 * (1.0 - (-t).exp()), epsilon = 1e-14);
        }
        assert!(traj.u_ntk_test.is_empty());
    }

    #[test]
    fn identity_kernel_without_ridge_decouples() {
        let k = KernelMatrix::new(DMatrix::identity(3, 3), KernelKind::NtkExact).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.8, 1.0]);
        let traj = krr_flow_integrated(&k, &y, 0.0, 1.0, 0.01, 3.0, None).unwrap();
        for (t, u) in traj.times.iter().zip(&traj.u_ntk) {
            assert!((u - &y * (1.0 - (-t).exp())).amax() < 1e-9);
        }
    }

    #[test]
    fn closed_flow_reaches_optimum() {
        let (ds, k) = instance(8, 5);
        let (lambda, kappa) = (0.05, 1.0);
        let rate = flow_rate(&k, lambda, kappa);
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa).unwrap();
        let traj = krr_flow_closed(&k, &ds.y, lambda, kappa, &[0.0, 50.0 / rate], None).unwrap();
        assert_eq!(traj.u_ntk[0].norm(), 0.0);
        assert!((&traj.u_ntk[1] - &sol.u_star).norm() < 1e-8);
    }

    #[test]
    fn integrated_matches_closed_including_test_point() {
        let (ds, k) = instance(6, 6);
        let (lambda, kappa) = (0.03, 0.8);
        let kv = ntk_kernel_vec(ds.x_test.as_ref().unwrap(), &ds.x).unwrap();
        let dt = 0.05 / (kappa * kappa * k.spectral_norm() + lambda);
        let rk = krr_flow_integrated(&k, &ds.y, lambda, kappa, dt, 20.0, Some(&kv)).unwrap();
        let cf = krr_flow_closed(&k, &ds.y, lambda, kappa, &rk.times, Some(&kv)).unwrap();
        for i in 0..rk.len() {
            assert!((&rk.u_ntk[i] - &cf.u_ntk[i]).amax() < 1e-6);
            assert!((rk.u_ntk_test[i] - cf.u_ntk_test[i]).abs() < 1e-6);
        }
        // the test flow converges to the KRR test prediction
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa)
            .unwrap()
            .with_test(&kv)
            .unwrap();
        let late = krr_flow_closed(&k, &ds.y, lambda, kappa, &[0.0, 1e5], Some(&kv)).unwrap();
        assert_abs_diff_eq!(late.u_ntk_test[1], sol.u_test_star.unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn decay_contract_and_monotonicity() {
        let (ds, k) = instance(8, 7);
        let (lambda, kappa) = (0.02, 1.0);
        let rate = flow_rate(&k, lambda, kappa);
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa).unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.5).collect();
        let traj = krr_flow_closed(&k, &ds.y, lambda, kappa, &times, None).unwrap();
        let e0 = sol.u_star.norm();
        let mut prev = f64::INFINITY;
        let mut prev_scaled = f64::INFINITY;
        for (t, u) in traj.times.iter().zip(&traj.u_ntk) {
            let e = (u - &sol.u_star).norm();
            assert!(e <= (-rate * t).exp() * e0 * (1.0 + 1e-12) + 1e-14);
            assert!(e < prev);
            let scaled = (2.0 * rate * t).exp() * e * e;
            assert!(scaled <= prev_scaled * (1.0 + 1e-10));
            prev = e;
            prev_scaled = scaled;
        }
    }

    #[test]
    fn rejects_unstable_step_and_bad_times() {
        let (ds, k) = instance(4, 8);
        let err = krr_flow_integrated(&k, &ds.y, 0.1, 1.0, 10.0, 1.0, None).unwrap_err();
        assert!(err.is_configuration());
        assert!(krr_flow_closed(&k, &ds.y, 0.1, 1.0, &[0.5, 1.0], None).is_err());
        assert!(krr_flow_closed(&k, &ds.y, 0.1, 1.0, &[0.0, 1.0, 1.0], None).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let (ds, k) = instance(3, 9);
        let traj = krr_flow_closed(&k, &ds.y, 0.1, 1.0, &[0.0, 1.0], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        traj.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,u_0,u_1,u_2,u_test");
        assert!(lines[1].ends_with(','));
        assert_eq!(lines.len(), 3);
    }
}
