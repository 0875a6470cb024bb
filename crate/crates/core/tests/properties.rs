use mflab_core::gaussian_flow::{propagate_linear_fp, propagate_mean_field, GaussianState};
use mflab_core::moments::{
    covariance_closed_form, default_step, integrate_moments, propagator, BoundConstants,
    MomentState,
};
use mflab_core::particles::{empirical_stats, Ensemble, NoiseStream};
use mflab_core::stability::{linear_fp_stability, mean_field_stability};
use mflab_core::symmat::{spd_check, sym_eigen};
use mflab_core::wasserstein::w2_gaussian;
use mflab_core::{DMatrix, DVector, Dynamics, ProblemSpec, SymMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> SymMatrix {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    SymMatrix::symmetrize(&(&a * a.transpose() + DMatrix::identity(d, d) * floor)).unwrap()
}

fn dynamics(rng: &mut ChaCha8Rng, d: usize, k: usize, sigma: f64) -> Dynamics {
    let p = ProblemSpec::new(
        DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0)),
        spd(rng, k, 0.5),
        spd(rng, d, 0.5),
        DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0)),
    )
    .unwrap();
    Dynamics::new(p, sigma).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianState {
    GaussianState::new(
        DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
        spd(rng, d, 0.2),
    )
    .unwrap()
}

fn exactly_symmetric(m: &SymMatrix) -> bool {
    let a = m.as_matrix();
    a == &a.transpose()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric_storage_survives_arithmetic(seed in any::<u64>(), d in 1usize..6, c in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(&mut rng, d, 0.0);
        let b = spd(&mut rng, d, 0.0);
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        for m in [a.add(&b), a.sub(&b), a.scale(c), a.axpy(c, &b), SymMatrix::congruence(&g, &a)] {
            prop_assert!(exactly_symmetric(&m));
        }
    }

    #[test]
    fn spd_check_follows_threshold(seed in any::<u64>(), d in 1usize..6, shift in -2.0f64..2.0, tol in 0.0f64..1e-3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = spd(&mut rng, d, 0.0).axpy(shift, &SymMatrix::identity(d));
        let check = spd_check(&m, tol).unwrap();
        let eig = sym_eigen(&m).unwrap();
        let radius = eig.values.iter().fold(0.0f64, |r, v| r.max(v.abs()));
        prop_assert_eq!(check.is_spd, check.min_eigenvalue > -tol * radius.max(1.0));
        prop_assert!((check.min_eigenvalue - eig.min()).abs() <= 1e-12 * radius.max(1.0));
    }

    #[test]
    fn posterior_consistency(seed in any::<u64>(), d in 1usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, k, 1.0);
        let prod = dy.b().as_matrix() * dy.b_inv().as_matrix();
        prop_assert!((prod - DMatrix::identity(d, d)).norm() <= 1e-10 * dy.b_inv().frobenius_norm().max(1.0));
        prop_assert!(spd_check(dy.b_inv(), 0.0).unwrap().is_spd);
        prop_assert!(dy.grad_misfit_posterior(dy.u0()).unwrap().norm() <= 1e-10);
    }

    #[test]
    fn covariance_stays_spd(seed in any::<u64>(), d in 1usize..4, sigma in 0.0f64..2.0, t in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, d, sigma);
        let c0 = spd(&mut rng, d, 0.05);
        let st = MomentState::new(0.0, DVector::zeros(d), c0.clone()).unwrap();
        let out = integrate_moments(&dy, &st, t, default_step(&dy, &c0)).unwrap();
        prop_assert!(spd_check(&out.c, 0.0).unwrap().is_spd);
        prop_assert!(spd_check(&covariance_closed_form(&dy, &c0, t).unwrap(), 0.0).unwrap().is_spd);
    }

    #[test]
    fn propagator_identity_and_conjugation(seed in any::<u64>(), d in 1usize..4, sigma in 0.0f64..2.0, s in 0.0f64..1.5, dt in 0.0f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, d, sigma);
        let c0 = spd(&mut rng, d, 0.2);
        let same = propagator(&dy, &c0, s, s, 1e-3).unwrap();
        prop_assert_eq!(same.u, DMatrix::identity(d, d));
        let t = s + dt;
        let u = propagator(&dy, &c0, s, t, 1e-3).unwrap().u;
        let cs_inv = covariance_closed_form(&dy, &c0, s).unwrap().as_matrix().clone().try_inverse().unwrap();
        let ct_inv = covariance_closed_form(&dy, &c0, t).unwrap().as_matrix().clone().try_inverse().unwrap();
        let lhs = u.transpose() * ct_inv * &u;
        let rhs = &cs_inv * (-2.0 * sigma * dt).exp();
        prop_assert!((lhs - &rhs).norm() <= 1e-6 * rhs.norm());
    }

    #[test]
    fn bound_constants_dominate(seed in any::<u64>(), d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, d, 1.0);
        let a = MomentState::new(0.0, DVector::from_element(d, 0.3), spd(&mut rng, d, 0.1)).unwrap();
        let b = MomentState::new(0.0, DVector::from_element(d, -1.0), spd(&mut rng, d, 0.1)).unwrap();
        let k = BoundConstants::for_pair(&dy, &a, &b).unwrap();
        prop_assert!(k.big_m * k.small_m >= 1.0);
        prop_assert!(k.r >= a.delta.norm().max(b.delta.norm()));
        for c in [&a.c, &b.c, dy.b()] {
            prop_assert!(c.spectral_radius().unwrap() <= k.big_m);
        }
    }

    #[test]
    fn noise_stream_is_reproducible(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..20) {
        let a = NoiseStream::new(seed).normal_matrix(rows, cols);
        let b = NoiseStream::new(seed).normal_matrix(rows, cols);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn empirical_stats_psd_with_one_over_j(seed in any::<u64>(), d in 1usize..4, k in 1usize..4, j in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, k, 1.0);
        let u = DMatrix::from_fn(d, j, |_, _| rng.random_range(-3.0..3.0));
        let e = Ensemble::from_columns(u.clone(), 0.0).unwrap();
        let stats = empirical_stats(&e, &dy.problem).unwrap();
        let tol = 1e-10;
        prop_assert!(spd_check(&stats.cuu, tol).unwrap().is_spd);
        prop_assert!(spd_check(&stats.cpp, tol).unwrap().is_spd);
        let mean = u.column_mean();
        let mut cuu = DMatrix::zeros(d, d);
        for col in u.column_iter() {
            let c = col - &mean;
            cuu += &c * c.transpose();
        }
        cuu /= j as f64;
        prop_assert!((stats.cuu.as_matrix() - cuu).norm() <= 1e-12 * (1.0 + stats.cuu.frobenius_norm()));
    }

    #[test]
    fn mean_field_is_linear_flow_with_matching_c0(seed in any::<u64>(), d in 1usize..4, sigma in 0.0f64..2.0, t in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, d, sigma);
        let f0 = gaussian(&mut rng, d);
        let mf = propagate_mean_field(&dy, &f0, t).unwrap();
        let lin = propagate_linear_fp(&dy, &f0.cov, &f0, t, Some(400)).unwrap();
        prop_assert!(w2_gaussian(&mf, &lin).unwrap().distance <= 1e-6 * (1.0 + mf.mu.norm()));
    }

    #[test]
    fn stability_reports_are_finite(seed in any::<u64>(), d in 1usize..3, sigma in 0.1f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dy = dynamics(&mut rng, d, d, sigma);
        let (f1, f2) = (gaussian(&mut rng, d), gaussian(&mut rng, d));
        let grid: Vec<f64> = (0..=10).map(|k| 0.3 * k as f64).collect();
        let c0 = spd(&mut rng, d, 0.2);
        for r in [
            linear_fp_stability(&dy, &c0, &f1, &f2, &grid, None).unwrap(),
            mean_field_stability(&dy, &f1, &f2, &grid, None).unwrap(),
        ] {
            prop_assert!(r.w2.iter().all(|w| *w >= 0.0));
            prop_assert!(r.ratio.iter().all(|q| q.is_finite()));
        }
    }
}
