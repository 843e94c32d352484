mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::oracle;
use ntklev::features::{build_feature_matrix, sample_leverage_features, FeatureFamily};
use ntklev::kernels::{
    min_eigenvalue, ntk_gram, psd_sandwich_check, statistical_dimension, KernelKind,
};
use ntklev::krr::{flow_rate, krr_flow_closed, solve_krr_dual, solve_krr_primal};
use ntklev::nn::{dynamic_kernel, gradient, init_gaussian, loss};
use ntklev::{generate_dataset, KernelMatrix, RegularizedKernel, SeedStream};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn dataset_generation_is_deterministic(seed in any::<u64>(), n in 1usize..12, d in 2usize..6) {
        let a = generate_dataset(n, d, SeedStream::new(seed, 0), 0.05).unwrap();
        let b = generate_dataset(n, d, SeedStream::new(seed, 0), 0.05).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ntk_gram_is_psd(seed in any::<u64>(), n in 1usize..16, d in 2usize..8) {
        let ds = generate_dataset(n, d, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        prop_assert!(min_eigenvalue(&k) >= -1e-10);
        let jacobi = oracle::jacobi_eigenvalues(k.values());
        prop_assert!(jacobi[0] >= -1e-10);
    }

    #[test]
    fn statistical_dimension_decreases_in_ridge(seed in any::<u64>(), l1 in 1e-4f64..10.0, factor in 1.0f64..100.0) {
        let ds = generate_dataset(8, 4, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        let small = statistical_dimension(&k, l1).unwrap();
        let large = statistical_dimension(&k, l1 * factor).unwrap();
        prop_assert!(small >= large - 1e-12);
    }

    #[test]
    fn exact_kernel_passes_sandwich_for_any_eps(seed in any::<u64>(), lambda in 1e-3f64..5.0, eps in 0.0f64..1.0) {
        let ds = generate_dataset(6, 3, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        let reg = RegularizedKernel::new(k.clone(), lambda).unwrap();
        let cert = psd_sandwich_check(&k, &reg, eps).unwrap();
        prop_assert!(cert.holds, "deviation {}", cert.worst_deviation);
    }

    #[test]
    fn residual_identity(seed in any::<u64>(), lambda in 1e-3f64..5.0, kappa in 0.05f64..2.0) {
        let ds = generate_dataset(7, 4, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa).unwrap();
        let a = k.values() * (kappa * kappa) + DMatrix::identity(7, 7) * lambda;
        let expected = oracle::gauss_jordan_inverse(&a) * &ds.y * lambda;
        prop_assert!((&ds.y - &sol.u_star - expected).amax() <= 1e-10);
    }

    #[test]
    fn primal_matches_dual_on_leverage_features(seed in any::<u64>(), lambda in 0.01f64..1.0, m in 4usize..40) {
        let ds = generate_dataset(6, 3, SeedStream::new(seed, 0), 0.05).unwrap();
        let family = FeatureFamily::ReluNtk;
        let reg = RegularizedKernel::new(ntk_gram(&ds.x).unwrap(), lambda).unwrap();
        let samples = sample_leverage_features(family, m, &ds.x, &reg, SeedStream::new(seed, 1)).unwrap();
        let psi = build_feature_matrix(&ds.x, &samples, family).unwrap();
        let primal = solve_krr_primal(&psi, &ds.y, lambda).unwrap();
        let dual = solve_krr_dual(&psi.gram(), &ds.y, lambda, 1.0).unwrap();
        prop_assert!((&primal.u_hat - &dual.u_star).norm() <= 1e-8 * (1.0 + ds.y.norm()));
    }

    #[test]
    fn leverage_weights_satisfy_identity(seed in any::<u64>(), lambda in 0.01f64..1.0) {
        let ds = generate_dataset(5, 3, SeedStream::new(seed, 0), 0.05).unwrap();
        let reg = RegularizedKernel::new(ntk_gram(&ds.x).unwrap(), lambda).unwrap();
        let s = reg.statistical_dimension();
        let samples = sample_leverage_features(FeatureFamily::ReluNtk, 16, &ds.x, &reg, SeedStream::new(seed, 1)).unwrap();
        for sample in samples {
            let ratio = sample.lev_ratio.unwrap();
            prop_assert!((sample.weight * sample.weight * ratio - s).abs() <= 1e-10 * s.max(1.0));
        }
    }

    #[test]
    fn flow_error_decays(seed in any::<u64>(), lambda in 1e-3f64..1.0, kappa in 0.2f64..2.0) {
        let ds = generate_dataset(6, 4, SeedStream::new(seed, 0), 0.05).unwrap();
        let k = ntk_gram(&ds.x).unwrap();
        let sol = solve_krr_dual(&k, &ds.y, lambda, kappa).unwrap();
        let rate = flow_rate(&k, lambda, kappa);
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.25 / rate).collect();
        let traj = krr_flow_closed(&k, &ds.y, lambda, kappa, &times, None).unwrap();
        let errs: Vec<f64> = traj.u_ntk.iter().map(|u| (u - &sol.u_star).norm()).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        let weighted: Vec<f64> = errs
            .iter()
            .zip(&times)
            .map(|(e, t)| (2.0 * rate * t).exp() * e * e)
            .collect();
        for w in weighted.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn dynamic_kernel_entries_bounded(seed in any::<u64>(), m in 1usize..200, kappa in 0.1f64..2.0) {
        let ds = generate_dataset(6, 3, SeedStream::new(seed, 0), 0.05).unwrap();
        let net = init_gaussian(m, 3, kappa, 0.0, SeedStream::new(seed, 1)).unwrap();
        let h = dynamic_kernel(&net, &ds.x).unwrap();
        let cap = net.rho.iter().fold(0.0_f64, |a, r| a.max(r * r));
        prop_assert!(h.values().amax() <= cap * (1.0 + 1e-12));
    }

    #[test]
    fn gradient_agrees_with_central_differences(seed in any::<u64>(), lambda in 0.0f64..0.1) {
        let h = 1e-5;
        let ds = generate_dataset(4, 3, SeedStream::new(seed, 0), 0.05).unwrap();
        let mut net = init_gaussian(12, 3, 1.0, lambda, SeedStream::new(seed, 1)).unwrap();
        let g = gradient(&net, &ds.x, &ds.y).unwrap();
        let pre = &ds.x * &net.w;
        for r in 0..net.m() {
            if pre.column(r).iter().any(|p| p.abs() < 100.0 * h) {
                continue;
            }
            for k in 0..3 {
                let orig = net.w[(k, r)];
                net.w[(k, r)] = orig + h;
                let up = loss(&net, &ds.x, &ds.y).unwrap();
                net.w[(k, r)] = orig - h;
                let down = loss(&net, &ds.x, &ds.y).unwrap();
                net.w[(k, r)] = orig;
                let fd = (up - down) / (2.0 * h);
                let scale = g[(k, r)].abs().max(fd.abs()).max(1e-8);
                prop_assert!((g[(k, r)] - fd).abs() <= 1e-5 * scale);
            }
        }
    }

    #[test]
    fn symmetrized_feature_gram_is_psd(seed in any::<u64>(), n in 1usize..10, p in 1usize..10) {
        let mut rng = SeedStream::new(seed, 0).rng();
        let psi = DMatrix::from_fn(n, p, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let k = KernelMatrix::symmetrized(&psi * psi.transpose(), KernelKind::FeatureGram).unwrap();
        prop_assert!(min_eigenvalue(&k) >= -1e-10 * (1.0 + k.spectral_norm()));
        prop_assert_eq!(k.values().clone(), k.values().transpose());
    }
}
