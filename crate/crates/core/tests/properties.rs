use gcgp_core::covariance::{arcsine_entry, self_covariance, GraphInput, KernelConfig, KernelKind, Structure};
use gcgp_core::gp::{factor_with_jitter, posterior_mean};
use gcgp_core::graph::{normalize_adjacency, propagate, SparseAdjacency};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn adjacency(n: usize, mask: &[bool]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut it = mask.iter();
    for i in 0..n {
        for j in (i + 1)..n {
            if *it.next().unwrap_or(&false) {
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    a
}

fn power_iteration(m: &DMatrix<f64>) -> f64 {
    let mut v = DMatrix::from_fn(m.nrows(), 1, |i, _| 1.0 + 0.1 * i as f64);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = m * &v;
        lambda = w.norm() / v.norm();
        v = &w / w.norm();
    }
    lambda
}

fn kcfg(beta: f64) -> KernelConfig {
    KernelConfig { k: 0, beta, sigma_w2: 1.0, feature_scale: 1.0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive(n in 1usize..12, mask in prop::collection::vec(any::<bool>(), 66)) {
        let a = adjacency(n, &mask);
        let a_hat = normalize_adjacency(&a).unwrap();
        prop_assert!((&a_hat - a_hat.transpose()).amax() <= 1e-12);
        let dense_radius = SymmetricEigen::new(a_hat.clone()).eigenvalues.amax();
        prop_assert!(dense_radius <= 1.0 + 1e-12);
        prop_assert!((power_iteration(&a_hat) - dense_radius).abs() < 1e-6);
        let sparse = SparseAdjacency::from_dense(&a).unwrap().normalized().to_dense();
        prop_assert!((sparse - a_hat).amax() <= 1e-15);
    }

    #[test]
    fn propagation_composes(n in 1usize..10, mask in prop::collection::vec(any::<bool>(), 45), a in 0usize..4, b in 0usize..4, seed in any::<u64>()) {
        let adj = adjacency(n, &mask);
        let sparse = SparseAdjacency::from_dense(&adj).unwrap().normalized();
        let mut state = seed;
        let x = DMatrix::from_fn(n, 3, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let once = propagate(&sparse, &x, a + b).unwrap();
        let twice = propagate(&sparse, &propagate(&sparse, &x, a).unwrap(), b).unwrap();
        prop_assert!((once - twice).amax() <= 1e-10);
    }

    #[test]
    fn arcsine_is_symmetric_and_bounded(x in prop::collection::vec(-1e3f64..1e3, 4), y in prop::collection::vec(-1e3f64..1e3, 4), beta in 1e-6f64..10.0) {
        let c = kcfg(beta);
        let kxy = arcsine_entry(&x, &y, &c).unwrap();
        prop_assert_eq!(kxy, arcsine_entry(&y, &x, &c).unwrap());
        prop_assert!(kxy.abs() < 1.0);
    }

    #[test]
    fn arcsine_moves_monotonically_along_a_ray(x in prop::collection::vec(-2f64..2.0, 3), beta in 0.05f64..2.0) {
        // same direction on both sides: value rises toward 1 as the scale grows
        let c = kcfg(beta);
        let mut last = f64::NEG_INFINITY;
        for step in 0..20 {
            let s = 0.25 * step as f64;
            let v: Vec<f64> = x.iter().map(|t| s * t).collect();
            let k = arcsine_entry(&v, &v, &c).unwrap();
            prop_assert!(k >= last - 1e-15);
            last = k;
        }
    }

    #[test]
    fn posterior_mean_is_linear_in_labels(seed in any::<u64>(), a in -3f64..3.0, b in -3f64..3.0, m in 1usize..8) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let xs = DMatrix::from_fn(m, 3, |_, _| next());
        let xt = DMatrix::from_fn(5, 3, |_, _| next());
        let y1 = DMatrix::from_fn(m, 2, |_, _| next());
        let y2 = DMatrix::from_fn(m, 2, |_, _| next());
        let c = kcfg(0.3);
        let kss = self_covariance(KernelKind::Arcsine, &GraphInput::new(&xs, Structure::Identity), &c).unwrap();
        let kx = gcgp_core::covariance::kernel_matrix(KernelKind::Arcsine, &xt, &xs, &c).unwrap();
        let combo = &y1 * a + &y2 * b;
        let (lhs, _) = posterior_mean(&kx, &kss, &combo, 0.3).unwrap();
        let (p1, _) = posterior_mean(&kx, &kss, &y1, 0.3).unwrap();
        let (p2, _) = posterior_mean(&kx, &kss, &y2, 0.3).unwrap();
        prop_assert!((lhs - (p1 * a + p2 * b)).amax() <= 1e-9);
    }

    #[test]
    fn beta_perturbation_is_lipschitz(seed in any::<u64>(), delta in 1e-9f64..1e-3) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let xs = DMatrix::from_fn(6, 4, |_, _| next());
        let xt = DMatrix::from_fn(10, 4, |_, _| next());
        let y = DMatrix::from_fn(6, 3, |_, _| next());
        let c = kcfg(0.5);
        let kss = self_covariance(KernelKind::Arcsine, &GraphInput::new(&xs, Structure::Identity), &c).unwrap();
        let kx = gcgp_core::covariance::kernel_matrix(KernelKind::Arcsine, &xt, &xs, &c).unwrap();
        let (f0, _) = posterior_mean(&kx, &kss, &y, 0.5).unwrap();
        let (f1, _) = posterior_mean(&kx, &kss, &y, 0.5 + delta).unwrap();
        // ‖K_cross‖ ‖M⁻¹‖² ‖Y‖ with ‖M⁻¹‖ ≤ 1/β bounds the derivative
        let bound = kx.norm() * y.norm() / 0.25;
        prop_assert!((f1 - f0).norm() <= bound * delta);
    }

    #[test]
    fn condensed_self_covariance_factors_without_jitter(seed in any::<u64>(), m in 1usize..33, log_beta in -3f64..1.0) {
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let xs = DMatrix::from_fn(m, 8, |_, _| 4.0 * next());
        let mask: Vec<bool> = (0..m * m).map(|_| next() > 0.2).collect();
        let a_hat = normalize_adjacency(&adjacency(m, &mask)).unwrap();
        let beta = 10f64.powf(log_beta);
        let c = KernelConfig { k: 2, beta, sigma_w2: 1.0, feature_scale: 1.0 / 8.0 };
        let kss = self_covariance(KernelKind::Arcsine, &GraphInput::new(&xs, Structure::Dense(&a_hat)), &c).unwrap();
        prop_assert!((&kss - kss.transpose()).amax() == 0.0);
        let (_, jitter) = factor_with_jitter(&kss, beta).unwrap();
        prop_assert_eq!(jitter, 0.0);
    }
}
