use std::f64::consts::TAU;

use fastslow::dynamics::{evaluate_rhs, heat_torus_system, lorenz_system};
use fastslow::ergodic::{batch_means, estimate_correlation, CorrelationOptions, FrozenFlow, LagGrid};
use fastslow::homogenize::symmetric_sqrt;
use fastslow::integrate::{integrate_fast_slow, integrate_frozen_fast, TimeGrid};
use fastslow::io::fmt_f64;
use fastslow::limitsde::{ks_two_sample, GaussianBump};
use fastslow::SeedSpec;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn matrix(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d * d)
}

fn product_aat(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn square_root_reconstructs_psd_part(d in 1usize..5, raw in matrix(4)) {
        let a0 = &raw[..d * d];
        let root = symmetric_sqrt(a0, d).unwrap();
        let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (a0[i * d + j] + a0[j * d + i]));
        let eig = SymmetricEigen::new(sym);
        let clipped = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)))
            * eig.eigenvectors.transpose();
        let aat = product_aat(&root.sqrt, d);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((aat[i * d + j] - clipped[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn square_root_of_gram_matrix_is_exact(d in 1usize..5, raw in matrix(4)) {
        // B·Bᵀ is PSD, so no clipping and the reconstruction is the matrix itself.
        let b = &raw[..d * d];
        let a0 = product_aat(b, d);
        let root = symmetric_sqrt(&a0, d).unwrap();
        prop_assert_eq!(root.clipped, 0);
        let aat = product_aat(&root.sqrt, d);
        for (x, y) in aat.iter().zip(&a0) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn clipped_square_root_is_psd(d in 1usize..5, raw in matrix(4)) {
        let root = symmetric_sqrt(&raw[..d * d], d).unwrap();
        let aat = DMatrix::from_row_slice(d, d, &product_aat(&root.sqrt, d));
        let eig = SymmetricEigen::new(aat);
        prop_assert!(eig.eigenvalues.iter().all(|l| *l >= -1e-8));
        let expected = root.eigenvalues.iter().filter(|l| **l < -1e-8).count();
        prop_assert_eq!(root.clipped, expected);
    }

    #[test]
    fn two_sample_ks_is_symmetric(
        a in prop::collection::vec(-3.0..3.0f64, 30..80),
        b in prop::collection::vec(-3.0..3.0f64, 30..80),
    ) {
        let ab = ks_two_sample(&a, &b).unwrap();
        let ba = ks_two_sample(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn bump_expectations_scale_linearly(xs in prop::collection::vec(-4.0..4.0f64, 1..50), k in 0.1..5.0f64) {
        let f = GaussianBump::new(vec![0.3]);
        let g = GaussianBump { center: vec![0.3], amplitude: k };
        for x in xs {
            prop_assert!((g.eval(&[x]) - k * f.eval(&[x])).abs() <= 1e-15 * k);
        }
    }

    #[test]
    fn floats_round_trip_through_text(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn batch_means_of_constant_have_no_error(c in -1e3..1e3f64, n in 16usize..400) {
        let avg = batch_means(&vec![c; n]);
        prop_assert!((avg.value - c).abs() <= 1e-12 * c.abs().max(1.0));
        prop_assert!(avg.stderr <= 1e-9 * c.abs().max(1.0));
    }

    #[test]
    fn skew_product_fast_rate_ignores_x(x1 in -10.0..10.0f64, x2 in -10.0..10.0f64, y in 0.0..1.0f64) {
        let sys = heat_torus_system(1.0).unwrap().with_epsilon(0.3).unwrap();
        let (_, f1) = evaluate_rhs(&sys, &[x1], &[y]).unwrap();
        let (_, f2) = evaluate_rhs(&sys, &[x2], &[y]).unwrap();
        prop_assert!((f1[0] - f2[0]).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lag_zero_equals_path_covariance(seed in 0u64..1000, k in 1u32..4) {
        let sys = heat_torus_system(1.0).unwrap();
        let grid = TimeGrid::new(10.0, 1e-3).recording_every(50);
        let base = integrate_frozen_fast(&sys, &[0.0], &[0.2], 1.0, &grid, SeedSpec::new(seed)).unwrap();
        let flow = FrozenFlow { system: &sys, x: &[0.0], delta: 1.0, dt: 1e-3 };
        let opts = CorrelationOptions {
            lags: LagGrid::new(0.05, 0.2),
            replicas: 2,
            burn_in: 0.5,
            s_stride: 1,
            seed: SeedSpec::new(seed + 1),
        };
        let v = move |y: &[f64]| (TAU * k as f64 * y[0]).cos();
        let c = estimate_correlation(v, v, &base, &flow, &opts).unwrap();
        let start = base.index_at(0.5);
        let vals: Vec<f64> = (start..base.len()).map(|i| v(base.y(i))).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let cov = vals.iter().map(|x| x * x).sum::<f64>() / n - mean * mean;
        prop_assert!((c.values[0] - cov).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_bilinear(seed in 0u64..1000, alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
        let sys = heat_torus_system(1.0).unwrap();
        let grid = TimeGrid::new(5.0, 1e-3).recording_every(50);
        let base = integrate_frozen_fast(&sys, &[0.0], &[0.7], 1.0, &grid, SeedSpec::new(seed)).unwrap();
        let flow = FrozenFlow { system: &sys, x: &[0.0], delta: 1.0, dt: 1e-3 };
        let opts = CorrelationOptions {
            lags: LagGrid::new(0.05, 0.2),
            replicas: 2,
            burn_in: 0.5,
            s_stride: 2,
            seed: SeedSpec::new(seed ^ 0xabc),
        };
        let v = |y: &[f64]| (TAU * y[0]).sin();
        let w1 = |y: &[f64]| (TAU * y[0]).cos();
        let w2 = |y: &[f64]| (2.0 * TAU * y[0]).sin();
        let c1 = estimate_correlation(v, w1, &base, &flow, &opts).unwrap();
        let c2 = estimate_correlation(v, w2, &base, &flow, &opts).unwrap();
        let mix = estimate_correlation(v, |y: &[f64]| alpha * w1(y) + beta * w2(y), &base, &flow, &opts).unwrap();
        for l in 0..mix.values.len() {
            let lin = alpha * c1.values[l] + beta * c2.values[l];
            prop_assert!((mix.values[l] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_seeds_give_identical_paths(seed in any::<u64>(), eps in 0.2..1.0f64) {
        let sys = lorenz_system(eps, 0.5).unwrap();
        let grid = TimeGrid::new(0.05, 1e-3 * eps * eps).recording_every(10);
        let a = integrate_fast_slow(&sys, &[0.1], &[13.93, 20.06, 26.87], &grid, SeedSpec::new(seed)).unwrap();
        let b = integrate_fast_slow(&sys, &[0.1], &[13.93, 20.06, 26.87], &grid, SeedSpec::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
