use mflab_core::moments::propagator;
use mflab_core::particles::{
    eki_sde_step, empirical_stats, run_simulation, Ensemble, NoiseStream, Scheme, StepOptions,
};
use mflab_core::{DMatrix, DVector, Dynamics, ProblemSpec, SymMatrix};

fn problem() -> Dynamics {
    let p = ProblemSpec::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.4, -0.3, 0.8]),
        SymMatrix::from_diagonal(&[0.5, 0.8]),
        SymMatrix::identity(2),
        DVector::from_vec(vec![1.0, -0.5]),
    )
    .unwrap();
    Dynamics::new(p, 1.0).unwrap()
}

fn init(j: usize, seed: u64) -> Ensemble {
    let cov = SymMatrix::symmetrize(&DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5])).unwrap();
    Ensemble::sample_gaussian(
        &DVector::from_vec(vec![0.5, 1.0]),
        &cov,
        j,
        &mut NoiseStream::new(seed),
    )
    .unwrap()
}

fn inv(m: &SymMatrix) -> DMatrix<f64> {
    m.as_matrix().clone().try_inverse().unwrap()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

// Without observation noise the ensemble covariance obeys dC/dt = −2 C Gᵀ Γ⁻¹ G C for
// any J, so C(t)⁻¹ = C(0)⁻¹ + 2t Gᵀ Γ⁻¹ G.
#[test]
fn noise_free_eki_sde_precision_grows_linearly() {
    let dy = problem();
    let p = &dy.problem;
    let mut e = init(12, 3);
    let c0_inv = inv(&empirical_stats(&e, p).unwrap().cuu);
    let info = p.forward().transpose() * p.gamma_inv().as_matrix() * p.forward();
    let (h, steps) = (1e-4, 5000);
    let zero = SymMatrix::zeros(2);
    let mut rng = NoiseStream::new(0);
    for _ in 0..steps {
        e = eki_sde_step(&e, &dy, h, &zero, &mut rng, StepOptions::default()).unwrap();
    }
    let t = h * steps as f64;
    let oracle = &c0_inv + &info * (2.0 * t);
    let got = inv(&empirical_stats(&e, p).unwrap().cuu);
    assert!(
        rel(&got, &oracle) < 1e-3,
        "relative gap {}",
        rel(&got, &oracle)
    );
}

// With Σ = Γ the mean-field covariance obeys dC/dt = −C Gᵀ Γ⁻¹ G C.
#[test]
fn noisy_eki_sde_precision_matches_mean_field() {
    let dy = problem();
    let p = &dy.problem;
    let j = 2000;
    let (h, steps) = (1e-3, 500);
    let t = h * steps as f64;
    let info = p.forward().transpose() * p.gamma_inv().as_matrix() * p.forward();
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut e = init(j, 10 + seed);
        let oracle = inv(&empirical_stats(&e, p).unwrap().cuu) + &info * t;
        let mut rng = NoiseStream::new(100 + seed);
        for _ in 0..steps {
            e = eki_sde_step(&e, &dy, h, p.gamma(), &mut rng, StepOptions::default()).unwrap();
        }
        worst = worst.max(rel(&inv(&empirical_stats(&e, p).unwrap().cuu), &oracle));
    }
    assert!(worst < 0.1, "relative gap {worst}");
}

#[test]
fn coupling_gap_follows_the_propagator() {
    let dy = problem();
    let x = init(25, 5);
    let y = init(25, 6);
    let c0 = SymMatrix::symmetrize(&DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5])).unwrap();
    let scheme = Scheme::Coupled {
        partner: x.clone(),
        c0: c0.clone(),
    };
    let t_end = 1.0;
    let records = run_simulation(
        &y,
        &scheme,
        &dy,
        1e-3,
        t_end,
        &mut NoiseStream::new(9),
        100,
        StepOptions::default(),
    )
    .unwrap();
    let last = records.last().unwrap();
    assert_eq!(last.t, t_end);
    let u = propagator(&dy, &c0, 0.0, t_end, 1e-4).unwrap().u;
    let moved = &u * (x.particles() - y.particles());
    let oracle = moved.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let gap = last.coupling_gap.unwrap();
    assert!(
        (gap - oracle).abs() <= 1e-2 * oracle,
        "gap {gap} vs {oracle}"
    );
}
