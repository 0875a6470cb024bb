//! Interacting particle systems: discrete EKI, the EKI SDE, the ensemble
//! Kalman sampler and the coupled linear Fokker–Planck SDE.
//!
//! Ensembles are stored column-wise (`d × J`). All steppers freeze the
//! ensemble statistics at the start of a step and update every particle
//! synchronously. Noise is drawn particle by particle, coordinate by
//! coordinate, from a single [`NoiseStream`].

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moments::CovarianceFlow;
use crate::problem::{Dynamics, ProblemSpec};
use crate::symmat::{op_norm2, sym_sqrt, SymMatrix};

/// Largest admissible `h·‖B⁻¹‖₂·‖Cuu‖₂` for the SDE steppers.
pub const STEP_GUARD: f64 = 0.1;

/// Seeded standard normal generator (polar Box–Muller over ChaCha8).
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.rng.random::<f64>() - 1.0;
            let v = 2.0 * self.rng.random::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    /// `rows × cols` matrix of independent draws, filled column by column.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m[(i, j)] = self.standard_normal();
            }
        }
        m
    }
}

/// `J ≥ 2` particles in `R^d`, one per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    u: DMatrix<f64>,
    pub t: f64,
}

impl Ensemble {
    /// From a `d × J` matrix.
    pub fn from_columns(u: DMatrix<f64>, t: f64) -> Result<Self> {
        if u.ncols() < 2 {
            return Err(Error::Validation(format!(
                "an ensemble needs at least 2 particles, got {}",
                u.ncols()
            )));
        }
        if u.nrows() == 0 {
            return Err(Error::Validation(
                "particles must have dimension >= 1".into(),
            ));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("particles must be finite".into()));
        }
        Ok(Self { u, t })
    }

    /// From a `J × d` matrix.
    pub fn from_rows(rows: &DMatrix<f64>, t: f64) -> Result<Self> {
        Self::from_columns(rows.transpose(), t)
    }

    /// `J` draws from `𝒩(mean, cov)`.
    pub fn sample_gaussian(
        mean: &DVector<f64>,
        cov: &SymMatrix,
        j: usize,
        rng: &mut NoiseStream,
    ) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                context: "ensemble mean vs covariance",
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        let root = sym_sqrt(cov)?;
        let xi = rng.normal_matrix(mean.len(), j);
        let mut u = root.as_matrix() * xi;
        for mut col in u.column_iter_mut() {
            col += mean;
        }
        Self::from_columns(u, 0.0)
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `J × d` copy, one particle per row.
    pub fn to_rows(&self) -> DMatrix<f64> {
        self.u.transpose()
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Mean computed relative to the first particle, so that identical
    /// particles give their common value exactly.
    pub fn mean(&self) -> DVector<f64> {
        let base = self.u.column(0).into_owned();
        let mut acc = DVector::zeros(self.dim());
        for col in self.u.column_iter() {
            acc += col - &base;
        }
        base + acc / self.len() as f64
    }

    fn centred(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut c = self.u.clone();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        c
    }

    /// `C^{uu}` with `1/J` normalization.
    pub fn covariance(&self) -> SymMatrix {
        let c = self.centred();
        SymMatrix::symmetrize(&(&c * c.transpose() / self.len() as f64)).expect("square")
    }
}

/// Ensemble means and cross-covariances for a linear forward model.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalStats {
    pub u_bar: DVector<f64>,
    pub g_bar: DVector<f64>,
    pub cuu: SymMatrix,
    pub cup: DMatrix<f64>,
    pub cpp: SymMatrix,
}

pub fn empirical_stats(e: &Ensemble, p: &ProblemSpec) -> Result<EmpiricalStats> {
    if e.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs problem",
            expected: p.dim(),
            got: e.dim(),
        });
    }
    let j = e.len() as f64;
    let uc = e.centred();
    let u_bar = e.mean();
    let g_bar = p.forward() * &u_bar;
    let gc = p.forward() * &uc;
    Ok(EmpiricalStats {
        u_bar,
        g_bar,
        cuu: SymMatrix::symmetrize(&(&uc * uc.transpose() / j))?,
        cup: &uc * gc.transpose() / j,
        cpp: SymMatrix::symmetrize(&(&gc * gc.transpose() / j))?,
    })
}

/// Switches for the SDE steppers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    /// Reject steps with `h·‖B⁻¹‖₂·‖Cuu‖₂ > STEP_GUARD`.
    pub guard: bool,
    /// Draw noise; `false` replaces every draw by zero.
    pub noise: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            guard: true,
            noise: true,
        }
    }
}

/// Fails when `h` exceeds `STEP_GUARD/(‖B⁻¹‖₂·‖Cuu‖₂)`.
pub fn check_step(dy: &Dynamics, cuu: &SymMatrix, h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let stiff = op_norm2(dy.b_inv().as_matrix()) * op_norm2(cuu.as_matrix());
    if stiff > 0.0 && h > STEP_GUARD / stiff {
        return Err(Error::StepTooLarge {
            h,
            limit: STEP_GUARD / stiff,
        });
    }
    Ok(())
}

fn is_zero(m: &SymMatrix) -> bool {
    m.as_matrix().iter().all(|v| *v == 0.0)
}

fn check_noise_cov(p: &ProblemSpec, sigma_noise: &SymMatrix) -> Result<()> {
    if sigma_noise.dim() != p.obs_dim() {
        return Err(Error::DimensionMismatch {
            context: "observation noise covariance",
            expected: p.obs_dim(),
            got: sigma_noise.dim(),
        });
    }
    Ok(())
}

/// `√Σ·ξ_j` for every particle (one column each), or `None` when `Σ = 0`.
fn observation_noise(
    sigma_noise: &SymMatrix,
    j: usize,
    rng: &mut NoiseStream,
    opts: StepOptions,
) -> Result<Option<DMatrix<f64>>> {
    if is_zero(sigma_noise) {
        return Ok(None);
    }
    let root = sym_sqrt(sigma_noise)?;
    let xi = if opts.noise {
        rng.normal_matrix(sigma_noise.dim(), j)
    } else {
        DMatrix::zeros(sigma_noise.dim(), j)
    };
    Ok(Some(root.as_matrix() * xi))
}

/// Residuals `y − G u_j`, one column per particle.
fn residuals(e: &Ensemble, p: &ProblemSpec) -> DMatrix<f64> {
    let mut r = -(p.forward() * e.particles());
    for mut col in r.column_iter_mut() {
        col += p.observation();
    }
    r
}

/// Tamed discrete EKI:
/// `u_j ← u_j + h C^{up}(h C^{pp} + Γ)⁻¹(y + η_j − G u_j)`, `η_j ~ 𝒩(0, Σ/h)`.
pub fn eki_step(
    e: &Ensemble,
    p: &ProblemSpec,
    h: f64,
    sigma_noise: &SymMatrix,
    rng: &mut NoiseStream,
) -> Result<Ensemble> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    check_noise_cov(p, sigma_noise)?;
    let stats = empirical_stats(e, p)?;
    let s = stats.cpp.scale(h).add(p.gamma()).into_matrix();
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::NumericalFailure("h·Cpp + Gamma is not positive definite".into()))?;
    // K = Cup S⁻¹, computed as (S⁻¹ Cupᵀ)ᵀ.
    let gain = chol.solve(&stats.cup.transpose()).transpose();
    let mut innov = residuals(e, p);
    if let Some(noise) = observation_noise(sigma_noise, e.len(), rng, StepOptions::default())? {
        innov += noise / h.sqrt();
    }
    let u = e.particles() + gain * innov * h;
    Ensemble::from_columns(u, e.t + h)
}

/// EKI SDE drift `C^{up} Γ⁻¹ (y − G u_j)` for every particle.
pub fn eki_sde_drift(e: &Ensemble, p: &ProblemSpec) -> Result<DMatrix<f64>> {
    let stats = empirical_stats(e, p)?;
    Ok(stats.cup * p.gamma_inv().as_matrix() * residuals(e, p))
}

/// Euler–Maruyama step of the EKI SDE:
/// `u_j ← u_j + C^{up} Γ⁻¹ (h(y − G u_j) + √h √Σ ξ_j)`.
pub fn eki_sde_step(
    e: &Ensemble,
    dy: &Dynamics,
    h: f64,
    sigma_noise: &SymMatrix,
    rng: &mut NoiseStream,
    opts: StepOptions,
) -> Result<Ensemble> {
    let p = &dy.problem;
    check_noise_cov(p, sigma_noise)?;
    let stats = empirical_stats(e, p)?;
    if opts.guard {
        check_step(dy, &stats.cuu, h)?;
    } else if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let mut innov = residuals(e, p) * h;
    if let Some(noise) = observation_noise(sigma_noise, e.len(), rng, opts)? {
        innov += noise * h.sqrt();
    }
    let u = e.particles() + stats.cup * p.gamma_inv().as_matrix() * innov;
    Ensemble::from_columns(u, e.t + h)
}

/// EKS drift in ensemble form:
/// `−(1/J) Σ_k ⟨G u_k − Ḡ, G u_j − y⟩_Γ (u_k − ū) − C^{uu} Γ0⁻¹ u_j`.
pub fn eks_drift_ensemble_form(e: &Ensemble, p: &ProblemSpec) -> Result<DMatrix<f64>> {
    let stats = empirical_stats(e, p)?;
    let gamma_inv = p.gamma_inv().as_matrix();
    let j = e.len();
    let d = e.dim();
    let gu = p.forward() * e.particles();
    let uc = e.centred();
    let mut out = DMatrix::zeros(d, j);
    for jj in 0..j {
        let r = gu.column(jj) - p.observation();
        let mut acc = DVector::zeros(d);
        for k in 0..j {
            let gk = gu.column(k) - &stats.g_bar;
            let w = gk.dot(&(gamma_inv * &r));
            acc += uc.column(k) * w;
        }
        out.set_column(jj, &(-acc / j as f64));
    }
    out -= stats.cuu.as_matrix() * p.gamma0_inv().as_matrix() * e.particles();
    Ok(out)
}

/// EKS drift in gradient form `−C^{uu} ∇Φ_R(u_j) = −C^{uu} B⁻¹ (u_j − u0)`.
pub fn eks_drift_gradient_form(e: &Ensemble, dy: &Dynamics) -> Result<DMatrix<f64>> {
    let cuu = e.covariance();
    let mut off = e.particles().clone();
    for mut col in off.column_iter_mut() {
        col -= dy.u0();
    }
    Ok(-(cuu.as_matrix() * dy.b_inv().as_matrix() * off))
}

/// Euler–Maruyama step of the ensemble Kalman sampler at noise level `σ`:
/// `u_j ← u_j − h C^{uu} B⁻¹ (u_j − u0) + √(2σh) (C^{uu})^{1/2} ξ_j`.
pub fn eks_step(e: &Ensemble, dy: &Dynamics, h: f64, rng: &mut NoiseStream) -> Result<Ensemble> {
    eks_step_with(e, dy, h, rng, StepOptions::default())
}

pub fn eks_step_with(
    e: &Ensemble,
    dy: &Dynamics,
    h: f64,
    rng: &mut NoiseStream,
    opts: StepOptions,
) -> Result<Ensemble> {
    if e.dim() != dy.dim() {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs problem",
            expected: dy.dim(),
            got: e.dim(),
        });
    }
    let cuu = e.covariance();
    if opts.guard {
        check_step(dy, &cuu, h)?;
    } else if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let mut u = e.particles() + eks_drift_gradient_form(e, dy)? * h;
    let sigma = dy.sigma();
    if sigma > 0.0 && opts.noise && !is_zero(&cuu) {
        let root = sym_sqrt(&cuu)?;
        let xi = rng.normal_matrix(e.dim(), e.len());
        u += root.as_matrix() * xi * (2.0 * sigma * h).sqrt();
    }
    Ensemble::from_columns(u, e.t + h)
}

/// Two ensembles driven by the same noise through the linear SDE
/// `dX = −C(t) B⁻¹ (X − u0) dt + √(2σ C(t)) dW`.
///
/// The second ensemble is carried as the base `Y` plus the difference
/// `Δ = X − Y`, which obeys `Δ ← (I − h C(t) B⁻¹) Δ` without any noise.
#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub base: Ensemble,
    pub delta: DMatrix<f64>,
}

impl CoupledPair {
    pub fn new(x: &Ensemble, y: &Ensemble) -> Result<Self> {
        if x.len() != y.len() || x.dim() != y.dim() {
            return Err(Error::Validation(format!(
                "coupled ensembles must match in size ({}x{} vs {}x{})",
                x.dim(),
                x.len(),
                y.dim(),
                y.len()
            )));
        }
        Ok(Self {
            base: y.clone(),
            delta: x.particles() - y.particles(),
        })
    }

    /// The ensemble `X = Y + Δ`.
    pub fn x(&self) -> Ensemble {
        Ensemble {
            u: self.base.particles() + &self.delta,
            t: self.base.t,
        }
    }

    pub fn y(&self) -> &Ensemble {
        &self.base
    }
}

/// `I − h C B⁻¹`.
pub fn coupled_difference_matrix(c: &SymMatrix, b_inv: &SymMatrix, h: f64) -> DMatrix<f64> {
    let d = c.dim();
    DMatrix::identity(d, d) - c.as_matrix() * b_inv.as_matrix() * h
}

pub fn coupled_linear_fp_step(
    pair: &CoupledPair,
    dy: &Dynamics,
    c_of_t: &dyn Fn(f64) -> Result<SymMatrix>,
    h: f64,
    rng: &mut NoiseStream,
) -> Result<CoupledPair> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    let t = pair.base.t;
    let c = c_of_t(t)?;
    if c.dim() != dy.dim() {
        return Err(Error::DimensionMismatch {
            context: "prescribed covariance",
            expected: dy.dim(),
            got: c.dim(),
        });
    }
    let y = pair.base.particles();
    let mut off = y.clone();
    for mut col in off.column_iter_mut() {
        col -= dy.u0();
    }
    let mut next = y - c.as_matrix() * dy.b_inv().as_matrix() * off * h;
    let sigma = dy.sigma();
    if sigma > 0.0 {
        let root = sym_sqrt(&c)?;
        let xi = rng.normal_matrix(dy.dim(), y.ncols());
        next += root.as_matrix() * xi * (2.0 * sigma * h).sqrt();
    }
    let m = coupled_difference_matrix(&c, dy.b_inv(), h);
    Ok(CoupledPair {
        base: Ensemble::from_columns(next, t + h)?,
        delta: m * &pair.delta,
    })
}

/// Particle scheme for [`run_simulation`].
#[derive(Clone, Debug)]
pub enum Scheme {
    Eki {
        sigma_noise: SymMatrix,
    },
    EkiSde {
        sigma_noise: SymMatrix,
    },
    Eks,
    /// `partner` is the initial `X`; the simulated ensemble is `Y`.
    Coupled {
        partner: Ensemble,
        c0: SymMatrix,
    },
}

/// Ensemble statistics at one recorded step.
#[derive(Clone, Debug)]
pub struct Record {
    pub t: f64,
    pub stats: EmpiricalStats,
    /// `max_j ‖X_j − Y_j‖` for the coupled scheme.
    pub coupling_gap: Option<f64>,
}

impl Record {
    /// `trace(Cuu)`.
    pub fn spread(&self) -> f64 {
        self.stats.cuu.trace()
    }
}

/// Runs `scheme` from `init` to `t_end` with step `h` (the last step is
/// shortened if needed), recording every `record_every` steps plus the
/// initial and final states.
#[allow(clippy::too_many_arguments)]
pub fn run_simulation(
    init: &Ensemble,
    scheme: &Scheme,
    dy: &Dynamics,
    h: f64,
    t_end: f64,
    rng: &mut NoiseStream,
    record_every: usize,
    opts: StepOptions,
) -> Result<Vec<Record>> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    if !(t_end >= init.t) {
        return Err(Error::Validation(format!(
            "t_end = {t_end} precedes the initial time {}",
            init.t
        )));
    }
    if record_every == 0 {
        return Err(Error::Validation("record_every must be >= 1".into()));
    }
    let p = &dy.problem;
    let t0 = init.t;
    let span = t_end - t0;
    let mut steps = (span / h).floor() as usize;
    let rest = span - steps as f64 * h;
    let partial = rest > 1e-9 * h;
    if partial {
        steps += 1;
    }

    let flow = match scheme {
        Scheme::Coupled { c0, .. } => Some(CovarianceFlow::new(dy, c0)?),
        _ => None,
    };
    let mut pair = match scheme {
        Scheme::Coupled { partner, .. } => Some(CoupledPair::new(partner, init)?),
        _ => None,
    };
    let mut e = init.clone();

    let record = |e: &Ensemble, pair: &Option<CoupledPair>| -> Result<Record> {
        let gap = pair
            .as_ref()
            .map(|pp| pp.delta.column_iter().map(|c| c.norm()).fold(0.0, f64::max));
        Ok(Record {
            t: e.t,
            stats: empirical_stats(e, p)?,
            coupling_gap: gap,
        })
    };

    let mut out = vec![record(&e, &pair)?];
    for k in 0..steps {
        let last = k + 1 == steps;
        let step = if last && partial { rest } else { h };
        e = match scheme {
            Scheme::Eki { sigma_noise } => eki_step(&e, p, step, sigma_noise, rng)?,
            Scheme::EkiSde { sigma_noise } => eki_sde_step(&e, dy, step, sigma_noise, rng, opts)?,
            Scheme::Eks => eks_step_with(&e, dy, step, rng, opts)?,
            Scheme::Coupled { .. } => {
                let flow = flow.as_ref().expect("coupled flow");
                let c_of_t = |t: f64| flow.at(t);
                let next =
                    coupled_linear_fp_step(pair.as_ref().expect("pair"), dy, &c_of_t, step, rng)?;
                let base = next.base.clone();
                pair = Some(next);
                base
            }
        };
        e.t = if last { t_end } else { t0 + (k + 1) as f64 * h };
        if let Some(pp) = pair.as_mut() {
            pp.base.t = e.t;
        }
        if (k + 1) % record_every == 0 || last {
            out.push(record(&e, &pair)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_problem(g: f64, gamma: f64, gamma0: f64, y: f64) -> ProblemSpec {
        ProblemSpec::new(
            DMatrix::from_element(1, 1, g),
            SymMatrix::from_diagonal(&[gamma]),
            SymMatrix::from_diagonal(&[gamma0]),
            DVector::from_element(1, y),
        )
        .unwrap()
    }

    fn random_problem(rng: &mut NoiseStream, d: usize, k: usize) -> ProblemSpec {
        let spd = |rng: &mut NoiseStream, n: usize| {
            let a = rng.normal_matrix(n, n);
            SymMatrix::symmetrize(&(&a * a.transpose() / n as f64 + DMatrix::identity(n, n)))
                .unwrap()
        };
        let g = rng.normal_matrix(k, d);
        let gamma = spd(rng, k);
        let gamma0 = spd(rng, d);
        let y = rng.normal_matrix(k, 1).column(0).into_owned();
        ProblemSpec::new(g, gamma, gamma0, y).unwrap()
    }

    fn two_particles() -> Ensemble {
        Ensemble::from_columns(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]), 0.0).unwrap()
    }

    #[test]
    fn noise_stream_reproducible_and_standard() {
        let mut a = NoiseStream::new(42);
        let mut b = NoiseStream::new(42);
        let xa: Vec<f64> = (0..1000).map(|_| a.standard_normal()).collect();
        let xb: Vec<f64> = (0..1000).map(|_| b.standard_normal()).collect();
        assert_eq!(xa, xb);
        let mut c = NoiseStream::new(43);
        assert_ne!(xa[0], c.standard_normal());

        let mut s = NoiseStream::new(7);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn ensemble_needs_two_particles() {
        assert!(Ensemble::from_columns(DMatrix::zeros(2, 1), 0.0).is_err());
        assert!(Ensemble::from_rows(&DMatrix::zeros(3, 2), 0.0).is_ok());
    }

    #[test]
    fn stats_examples() {
        let p = scalar_problem(1.0, 1.0, 1.0, 0.0);
        let s = empirical_stats(&two_particles(), &p).unwrap();
        assert_eq!(s.u_bar[0], 0.0);
        assert_eq!(s.cuu.get(0, 0), 1.0);

        let same = Ensemble::from_columns(DMatrix::from_element(1, 4, 2.5), 0.0).unwrap();
        let s = empirical_stats(&same, &p).unwrap();
        assert_eq!(s.cuu.get(0, 0), 0.0);
        assert_eq!(s.cup[(0, 0)], 0.0);
        assert_eq!(s.cpp.get(0, 0), 0.0);
    }

    #[test]
    fn stats_linear_consistency() {
        let mut rng = NoiseStream::new(1);
        let p = random_problem(&mut rng, 3, 4);
        let e = Ensemble::from_columns(rng.normal_matrix(3, 20), 0.0).unwrap();
        let s = empirical_stats(&e, &p).unwrap();
        let g = p.forward();
        assert!((&s.cup - s.cuu.as_matrix() * g.transpose()).norm() <= 1e-10);
        assert!((s.cpp.as_matrix() - g * s.cuu.as_matrix() * g.transpose()).norm() <= 1e-10);
    }

    #[test]
    fn eki_hand_case() {
        let p = scalar_problem(1.0, 1.0, 1.0, 0.0);
        let mut rng = NoiseStream::new(0);
        let out = eki_step(&two_particles(), &p, 1.0, &SymMatrix::zeros(1), &mut rng).unwrap();
        assert_eq!(out.particles().as_slice(), &[-0.5, 0.5]);
        assert_eq!(out.t, 1.0);
    }

    #[test]
    fn dirac_fixed_points() {
        let mut rng = NoiseStream::new(2);
        let p = random_problem(&mut rng, 2, 3);
        let dy = Dynamics::new(p.clone(), 1.0).unwrap();
        let u = DMatrix::from_fn(2, 5, |i, _| [0.3, -1.7][i]);
        let e = Ensemble::from_columns(u.clone(), 0.0).unwrap();
        let eki = eki_step(&e, &p, 0.5, &SymMatrix::zeros(3), &mut rng).unwrap();
        assert_eq!(eki.particles(), &u);
        let eks = eks_step(&e, &dy, 0.5, &mut rng).unwrap();
        assert_eq!(eks.particles(), &u);
    }

    #[test]
    fn eki_gain_consistency() {
        let mut rng = NoiseStream::new(3);
        let p = random_problem(&mut rng, 3, 2);
        let e = Ensemble::from_columns(rng.normal_matrix(3, 10), 0.0).unwrap();
        let s = empirical_stats(&e, &p).unwrap();
        let h = 0.3;
        let g = p.forward();
        let lhs = &s.cup
            * (s.cpp.as_matrix() * h + p.gamma().as_matrix())
                .try_inverse()
                .unwrap();
        let gcg = g * s.cuu.as_matrix() * g.transpose();
        let rhs = s.cuu.as_matrix()
            * g.transpose()
            * (gcg * h + p.gamma().as_matrix()).try_inverse().unwrap();
        assert!((lhs - rhs).norm() <= 1e-10);
    }

    #[test]
    fn eki_small_step_matches_sde_drift() {
        let mut rng = NoiseStream::new(4);
        let p = random_problem(&mut rng, 2, 2);
        let e = Ensemble::from_columns(rng.normal_matrix(2, 8), 0.0).unwrap();
        let drift = eki_sde_drift(&e, &p).unwrap();
        let mut errs = Vec::new();
        for h in [1e-2, 1e-3, 1e-4] {
            let next = eki_step(&e, &p, h, &SymMatrix::zeros(2), &mut rng).unwrap();
            let fd = (next.particles() - e.particles()) / h;
            errs.push((fd - &drift).norm());
        }
        assert!(
            errs[1] <= errs[0] * 0.2 && errs[2] <= errs[1] * 0.2,
            "{errs:?}"
        );
    }

    fn literal_eki_sde_increment(
        e: &Ensemble,
        p: &ProblemSpec,
        h: f64,
        noise: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let j = e.len();
        let u = e.particles();
        let gu = p.forward() * u;
        let ubar = u.column_mean();
        let gbar = gu.column_mean();
        let gi = p.gamma_inv().as_matrix();
        DMatrix::from_fn(e.dim(), j, |i, jj| {
            let bracket = (p.observation() - gu.column(jj)) * h + noise.column(jj) * h.sqrt();
            let mut acc = 0.0;
            for k in 0..j {
                let w = (gu.column(k) - &gbar).dot(&(gi * &bracket));
                acc += w * (u[(i, k)] - ubar[i]);
            }
            acc / j as f64
        })
    }

    #[test]
    fn eki_sde_matches_literal_sum() {
        let mut rng = NoiseStream::new(5);
        let p = random_problem(&mut rng, 2, 3);
        let dy = Dynamics::new(p.clone(), 1.0).unwrap();
        let e = Ensemble::from_columns(rng.normal_matrix(2, 6) * 0.1, 0.0).unwrap();
        let a = rng.normal_matrix(3, 3);
        let sig = SymMatrix::symmetrize(&(&a * a.transpose())).unwrap();
        let h = 1e-3;
        let mut r1 = NoiseStream::new(99);
        let next = eki_sde_step(&e, &dy, h, &sig, &mut r1, StepOptions::default()).unwrap();
        let mut r2 = NoiseStream::new(99);
        let noise = sym_sqrt(&sig).unwrap().as_matrix() * r2.normal_matrix(3, 6);
        let inc = literal_eki_sde_increment(&e, &p, h, &noise);
        assert!((next.particles() - e.particles() - inc).norm() <= 1e-12);

        let mut r3 = NoiseStream::new(1);
        let quiet = eki_sde_step(
            &e,
            &dy,
            h,
            &SymMatrix::zeros(3),
            &mut r3,
            StepOptions::default(),
        )
        .unwrap();
        let inc = literal_eki_sde_increment(&e, &p, h, &DMatrix::zeros(3, 6));
        assert!((quiet.particles() - e.particles() - inc).norm() <= 1e-12);
        assert_eq!(r3.standard_normal(), NoiseStream::new(1).standard_normal());
    }

    #[test]
    fn eks_drift_forms_agree() {
        let mut rng = NoiseStream::new(6);
        for (d, k) in [(1, 1), (2, 3), (3, 2)] {
            let p = random_problem(&mut rng, d, k);
            let dy = Dynamics::new(p.clone(), 1.0).unwrap();
            let e = Ensemble::from_columns(rng.normal_matrix(d, 7), 0.0).unwrap();
            let a = eks_drift_ensemble_form(&e, &p).unwrap();
            let b = eks_drift_gradient_form(&e, &dy).unwrap();
            assert!((a - b).norm() <= 1e-10);
        }
    }

    #[test]
    fn eks_hand_case() {
        // Scalar problem with B⁻¹ = 5 and u0 = 0.
        let p = scalar_problem(2.0, 1.0, 1.0, 0.0);
        let dy = Dynamics::new(p, 1.0).unwrap();
        let mut rng = NoiseStream::new(0);
        let opts = StepOptions {
            guard: false,
            noise: false,
        };
        let out = eks_step_with(&two_particles(), &dy, 0.1, &mut rng, opts).unwrap();
        assert_abs_diff_eq!(out.particles()[(0, 0)], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.particles()[(0, 1)], 0.5, epsilon = 1e-15);

        let err = eks_step(&two_particles(), &dy, 0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn eks_sigma_zero_is_deterministic() {
        let mut rng = NoiseStream::new(7);
        let p = random_problem(&mut rng, 2, 2);
        let dy = Dynamics::new(p, 0.0).unwrap();
        let e = Ensemble::from_columns(rng.normal_matrix(2, 10) * 0.3, 0.0).unwrap();
        let a = eks_step(&e, &dy, 1e-3, &mut NoiseStream::new(1)).unwrap();
        let b = eks_step(&e, &dy, 1e-3, &mut NoiseStream::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coupled_single_step_scalar() {
        let p = scalar_problem(2.0, 1.0, 1.0, 3.0);
        let dy = Dynamics::new(p, 1.0).unwrap();
        let c = SymMatrix::from_diagonal(&[0.7]);
        let c_of_t = |_t: f64| Ok(c.clone());
        let x =
            Ensemble::from_columns(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]), 0.0).unwrap();
        let y =
            Ensemble::from_columns(DMatrix::from_row_slice(1, 3, &[0.5, 0.0, 4.0]), 0.0).unwrap();
        let pair = CoupledPair::new(&x, &y).unwrap();
        let h = 0.01;
        let next =
            coupled_linear_fp_step(&pair, &dy, &c_of_t, h, &mut NoiseStream::new(3)).unwrap();
        for j in 0..3 {
            assert_eq!(
                next.delta[(0, j)],
                (1.0 - 0.7 * 5.0 * h) * pair.delta[(0, j)]
            );
        }
        let same = CoupledPair::new(&x, &x).unwrap();
        let next =
            coupled_linear_fp_step(&same, &dy, &c_of_t, h, &mut NoiseStream::new(3)).unwrap();
        assert_eq!(next.x(), next.base);
        let short = Ensemble::from_columns(DMatrix::zeros(1, 2), 0.0).unwrap();
        assert!(CoupledPair::new(&x, &short).is_err());
    }

    #[test]
    fn coupled_matches_naive_stepping() {
        let mut rng = NoiseStream::new(8);
        let p = random_problem(&mut rng, 2, 2);
        let dy = Dynamics::new(p, 0.8).unwrap();
        let c0 = SymMatrix::from_diagonal(&[0.5, 0.3]);
        let flow = CovarianceFlow::new(&dy, &c0).unwrap();
        let c_of_t = |t: f64| flow.at(t);
        let x0 = Ensemble::from_columns(rng.normal_matrix(2, 5), 0.0).unwrap();
        let y0 = Ensemble::from_columns(rng.normal_matrix(2, 5), 0.0).unwrap();
        let mut pair = CoupledPair::new(&x0, &y0).unwrap();
        let mut x = x0.particles().clone();
        let mut noise = NoiseStream::new(77);
        let mut shadow = NoiseStream::new(77);
        let h = 1e-3;
        for k in 0..200 {
            let t = k as f64 * h;
            let c = flow.at(t).unwrap();
            let mut off = x.clone();
            for mut col in off.column_iter_mut() {
                col -= dy.u0();
            }
            let xi = shadow.normal_matrix(2, 5);
            x = &x - c.as_matrix() * dy.b_inv().as_matrix() * off * h
                + sym_sqrt(&c).unwrap().as_matrix() * xi * (2.0 * 0.8 * h).sqrt();
            pair = coupled_linear_fp_step(&pair, &dy, &c_of_t, h, &mut noise).unwrap();
        }
        assert!((pair.x().particles() - x).norm() <= 1e-12);
    }

    #[test]
    fn run_records() {
        let mut rng = NoiseStream::new(9);
        let p = random_problem(&mut rng, 2, 2);
        let dy = Dynamics::new(p, 1.0).unwrap();
        let e = Ensemble::from_columns(rng.normal_matrix(2, 10) * 0.1, 0.0).unwrap();
        let recs = run_simulation(
            &e,
            &Scheme::Eks,
            &dy,
            1e-3,
            3e-3,
            &mut NoiseStream::new(1),
            1,
            StepOptions::default(),
        )
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].t, 0.0);
        assert_eq!(recs[3].t, 3e-3);

        let recs = run_simulation(
            &e,
            &Scheme::Eks,
            &dy,
            1e-3,
            1e-2,
            &mut NoiseStream::new(1),
            4,
            StepOptions::default(),
        )
        .unwrap();
        let ts: Vec<f64> = recs.iter().map(|r| r.t).collect();
        assert_eq!(ts.len(), 4);
        assert_eq!(*ts.last().unwrap(), 1e-2);

        let run = |seed| {
            run_simulation(
                &e,
                &Scheme::Eks,
                &dy,
                1e-3,
                5e-3,
                &mut NoiseStream::new(seed),
                1,
                StepOptions::default(),
            )
            .unwrap()
            .iter()
            .map(|r| r.stats.cuu.clone())
            .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn eks_sigma_zero_spread_decays_like_moment_ode() {
        let p = scalar_problem(2.0, 1.0, 1.0, 0.0);
        let dy = Dynamics::new(p, 0.0).unwrap();
        let e = Ensemble::sample_gaussian(
            &DVector::zeros(1),
            &SymMatrix::from_diagonal(&[0.04]),
            50,
            &mut NoiseStream::new(3),
        )
        .unwrap();
        let c0 = e.covariance().get(0, 0);
        let recs = run_simulation(
            &e,
            &Scheme::Eks,
            &dy,
            1e-3,
            2.0,
            &mut NoiseStream::new(0),
            500,
            StepOptions::default(),
        )
        .unwrap();
        for r in &recs {
            let oracle = 1.0 / (10.0 * r.t + 1.0 / c0);
            assert!(
                (r.spread() - oracle).abs() <= 1e-3 * oracle,
                "t {}: {} vs {oracle}",
                r.t,
                r.spread()
            );
        }
    }

    proptest! {
        #[test]
        fn covariance_is_psd_and_shift_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 6..=30),
            shift in -5.0f64..5.0,
        ) {
            let j = vals.len() / 2;
            let u = DMatrix::from_column_slice(2, j, &vals[..2 * j]);
            let e = Ensemble::from_columns(u.clone(), 0.0).unwrap();
            let c = e.covariance();
            let eig = crate::symmat::sym_eigen(&c).unwrap();
            prop_assert!(eig.min() >= -1e-12);
            let moved = Ensemble::from_columns(u.add_scalar(shift), 0.0).unwrap();
            prop_assert!((moved.covariance().as_matrix() - c.as_matrix()).norm() <= 1e-10);
        }
    }
}
