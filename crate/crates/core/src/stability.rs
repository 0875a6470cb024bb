//! W2 stability between evolving Gaussian solutions, decay envelopes, rate
//! fitting, sharpness diagnostics and randomized checks of the matrix
//! square-root inequalities behind them.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian_flow::{equilibrium, mean_field_path, GaussianState, LinearFlowPath};
use crate::moments::{
    alpha, default_step, BoundConstants, CovarianceFlow, MomentState, PropagatorPath,
};
use crate::particles::NoiseStream;
use crate::problem::Dynamics;
use crate::symmat::{op_norm2, sym_eigen, sym_sqrt, SymMatrix};
use crate::wasserstein::{w2_gaussian, w2_same_density_linear_bound};

/// Relative slack for asserted envelopes.
pub const ENVELOPE_SLACK: f64 = 1e-8;

/// Absolute round-off floor for asserted envelopes.
pub const ENVELOPE_FLOOR: f64 = 1e-12;

/// Values below this are treated as underflow by [`fit_rate`].
pub const UNDERFLOW: f64 = 1e-300;

/// `e^{−σt} / α(t)^{(1 + ⌊min(1, σ)⌋)/2}`.
pub fn gamma_rate(sigma: f64, t: f64) -> f64 {
    let power = (1.0 + sigma.min(1.0).floor()) / 2.0;
    (-sigma * t).exp() / alpha(sigma, t).powf(power)
}

/// Abscissa used by [`fit_rate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    /// Slope of `ln w2` against `t`.
    Time,
    /// Slope of `ln w2` against `ln(2t + 1)`.
    LogAlpha,
}

impl FitMode {
    pub fn for_sigma(sigma: f64) -> Self {
        if sigma > 0.0 {
            FitMode::Time
        } else {
            FitMode::LogAlpha
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
    /// The window was cut short because `w2` underflowed.
    pub truncated: bool,
}

/// Ordinary least squares slope of `ln w2` over the last `window` fraction of
/// the samples.
pub fn fit_rate(t: &[f64], w2: &[f64], window: f64, mode: FitMode) -> Result<RateFit> {
    if t.len() != w2.len() {
        return Err(Error::Validation(format!(
            "time and distance columns differ in length ({} vs {})",
            t.len(),
            w2.len()
        )));
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Validation(format!(
            "window must lie in (0, 1], got {window}"
        )));
    }
    if w2.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Validation("distances must be non-negative".into()));
    }
    let n = t.len();
    let take = ((n as f64) * window).round() as usize;
    let start = n - take.min(n);
    let mut end = n;
    let mut truncated = false;
    if let Some(k) = (start..n).find(|&k| w2[k] < UNDERFLOW) {
        end = k;
        truncated = true;
    }
    let points = end - start;
    if points < 4 {
        return Err(Error::Validation(format!(
            "rate fit needs at least 4 usable points, got {points}"
        )));
    }
    let xs: Vec<f64> = t[start..end]
        .iter()
        .map(|&s| match mode {
            FitMode::Time => s,
            FitMode::LogAlpha => alpha(0.0, s).ln(),
        })
        .collect();
    let ys: Vec<f64> = w2[start..end].iter().map(|w| w.ln()).collect();
    let m = points as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    if !(sxx > 0.0) {
        return Err(Error::Validation(
            "rate fit needs distinct abscissae".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: ybar - slope * xbar,
        points,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub t_grid: Vec<f64>,
    pub w2: Vec<f64>,
    pub envelope: Vec<f64>,
    /// `w2/envelope`, zero where both vanish.
    pub ratio: Vec<f64>,
    /// Tail-half rate fit; `None` when the distances are too small to fit.
    pub fitted_rate: Option<f64>,
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Validation("time grid is empty".into()));
    }
    if !(t_grid[0] >= 0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Validation(
            "time grid must be non-negative and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn report(t_grid: &[f64], w2: Vec<f64>, envelope: Vec<f64>, mode: FitMode) -> StabilityReport {
    let ratio = w2
        .iter()
        .zip(&envelope)
        .map(|(w, e)| {
            if *e > 0.0 {
                w / e
            } else if *w == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let fitted_rate = fit_rate(t_grid, &w2, 0.5, mode).ok().map(|f| f.slope);
    StabilityReport {
        t_grid: t_grid.to_vec(),
        w2,
        envelope,
        ratio,
        fitted_rate,
    }
}

/// Two solutions of the linear Fokker–Planck equation sharing the covariance
/// path started at `c0`. The envelope is `‖U(0,t)‖₂·W2(f¹₀, f²₀)`, and the
/// call fails with [`Error::InvariantViolation`] if it is exceeded.
pub fn linear_fp_stability(
    dy: &Dynamics,
    c0: &SymMatrix,
    f1: &GaussianState,
    f2: &GaussianState,
    t_grid: &[f64],
    panels: Option<usize>,
) -> Result<StabilityReport> {
    check_grid(t_grid)?;
    let w0 = w2_gaussian(f1, f2)?.distance;
    let flow = LinearFlowPath::compute(dy, c0, t_grid, panels)?;
    let mut w2 = Vec::with_capacity(t_grid.len());
    let mut envelope = Vec::with_capacity(t_grid.len());
    for (k, &t) in t_grid.iter().enumerate() {
        let (a, b) = if t == 0.0 {
            (f1.clone(), f2.clone())
        } else {
            (flow.state(k, f1)?, flow.state(k, f2)?)
        };
        let w = w2_gaussian(&a, &b)?.distance;
        let env = op_norm2(flow.propagator(k)) * w0;
        if w > env * (1.0 + ENVELOPE_SLACK) + ENVELOPE_FLOOR {
            return Err(Error::InvariantViolation(format!(
                "linear Fokker-Planck stability: W2 = {w:e} exceeds ||U(0,t)|| W2(0) = {env:e} at t = {t}"
            )));
        }
        w2.push(w);
        envelope.push(env);
    }
    Ok(report(t_grid, w2, envelope, FitMode::for_sigma(dy.sigma())))
}

/// Two Gaussian solutions of the mean-field equation, with envelope
/// `gamma_rate(σ, t)·W2(f¹₀, f²₀)`.
pub fn mean_field_stability(
    dy: &Dynamics,
    f1: &GaussianState,
    f2: &GaussianState,
    t_grid: &[f64],
    h: Option<f64>,
) -> Result<StabilityReport> {
    check_grid(t_grid)?;
    let w0 = w2_gaussian(f1, f2)?.distance;
    let p1 = mean_field_path(dy, f1, t_grid, h)?;
    let p2 = mean_field_path(dy, f2, t_grid, h)?;
    let sigma = dy.sigma();
    let mut w2 = Vec::with_capacity(t_grid.len());
    let mut envelope = Vec::with_capacity(t_grid.len());
    for ((a, b), &t) in p1.iter().zip(&p2).zip(t_grid) {
        w2.push(w2_gaussian(a, b)?.distance);
        envelope.push(gamma_rate(sigma, t) * w0);
    }
    Ok(report(t_grid, w2, envelope, FitMode::for_sigma(sigma)))
}

/// The three terms bounding `W2(f¹_t, f²_t)` for Gaussian mean-field solutions:
/// the Gaussian part `W2(𝒩(0, Σ₁(t)), 𝒩(0, Σ₂(t)))` with `Σᵢ = (1 − e^{−2σt}) Cᵢ(t)`,
/// the map mismatch `‖U₁ − U₂‖₂ √(tr C₁(0) + ‖δ₁(0)‖²)`, and the pushforward
/// `‖U₂(0,t)‖₂ W2(f¹₀, f²₀)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitTerms {
    pub t: f64,
    pub w2: f64,
    pub gaussian: f64,
    pub map_mismatch: f64,
    pub pushforward: f64,
}

impl SplitTerms {
    pub fn bound(&self) -> f64 {
        self.gaussian + self.map_mismatch + self.pushforward
    }
}

pub fn mean_field_split(
    dy: &Dynamics,
    f1: &GaussianState,
    f2: &GaussianState,
    t_grid: &[f64],
    h: Option<f64>,
) -> Result<Vec<SplitTerms>> {
    check_grid(t_grid)?;
    let w0 = w2_gaussian(f1, f2)?.distance;
    let sigma = dy.sigma();
    let flow1 = CovarianceFlow::new(dy, &f1.cov)?;
    let flow2 = CovarianceFlow::new(dy, &f2.cov)?;
    let h1 = h.unwrap_or_else(|| default_step(dy, &f1.cov).min(default_step(dy, &f2.cov)));
    let u1 = PropagatorPath::compute(&flow1, t_grid, h1)?;
    let u2 = PropagatorPath::compute(&flow2, t_grid, h1)?;
    let delta1 = &f1.mu - dy.u0();
    let d = dy.dim();
    t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (c1, c2) = (flow1.at(t)?, flow2.at(t)?);
            let s = 1.0 - (-2.0 * sigma * t).exp();
            let (a, b) = (u1.from_origin(k), u2.from_origin(k));
            let g1 = GaussianState::new(DVector::zeros(d), c1.scale(s))?;
            let g2 = GaussianState::new(DVector::zeros(d), c2.scale(s))?;
            let x1 = GaussianState::new(dy.u0() + a * &delta1, c1)?;
            let x2 = GaussianState::new(dy.u0() + b * (&f2.mu - dy.u0()), c2)?;
            Ok(SplitTerms {
                t,
                w2: w2_gaussian(&x1, &x2)?.distance,
                gaussian: w2_gaussian(&g1, &g2)?.distance,
                map_mismatch: w2_same_density_linear_bound(a, b, &delta1, &f1.cov)?,
                pushforward: op_norm2(b) * w0,
            })
        })
        .collect()
}

/// `W2(f_t, 𝒩(u0, σB))` along the grid.
pub fn equilibration_distance(
    dy: &Dynamics,
    f0: &GaussianState,
    t_grid: &[f64],
    h: Option<f64>,
) -> Result<Vec<f64>> {
    let eq = equilibrium(dy)?;
    mean_field_path(dy, f0, t_grid, h)?
        .iter()
        .map(|f| Ok(w2_gaussian(f, &eq)?.distance))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessReport {
    pub t_grid: Vec<f64>,
    /// `e^{σt} W2(f_t, f_∞)`.
    pub scaled: Vec<f64>,
    /// `‖δ(0)‖/(m M α(t))`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constants: BoundConstants,
}

/// `e^{σt} W2(f_t, f_∞)` between two envelopes built from the constants of
/// the pair `(f_0, f_∞)`:
///
/// ```text
/// lower = ‖δ(0)‖ / (m M α)
/// upper = √(mM/α)‖δ(0)‖ + e^{−σt} M²m² ‖C(0) − σB‖_F / (α² (1/√(mα) + 1/√m))
/// ```
///
/// Fails with [`Error::InvariantViolation`] if either envelope is crossed.
pub fn sharpness_diagnostic(
    dy: &Dynamics,
    f0: &GaussianState,
    t_grid: &[f64],
    h: Option<f64>,
) -> Result<SharpnessReport> {
    check_grid(t_grid)?;
    let sigma = dy.sigma();
    let eq = equilibrium(dy)?;
    let delta0 = &f0.mu - dy.u0();
    let start = MomentState::new(0.0, delta0.clone(), f0.cov.clone())?;
    let target = MomentState::new(0.0, DVector::zeros(dy.dim()), eq.cov.clone())?;
    let k = BoundConstants::for_pair(dy, &start, &target)?;
    let (big, small) = (k.big_m, k.small_m);
    let dc = (f0.cov.as_matrix() - eq.cov.as_matrix()).norm();
    let d0 = delta0.norm();

    let path = mean_field_path(dy, f0, t_grid, h)?;
    let mut scaled = Vec::with_capacity(t_grid.len());
    let mut lower = Vec::with_capacity(t_grid.len());
    let mut upper = Vec::with_capacity(t_grid.len());
    for (f, &t) in path.iter().zip(t_grid) {
        let al = alpha(sigma, t);
        let s = (sigma * t).exp() * w2_gaussian(f, &eq)?.distance;
        let lo = d0 / (small * big * al);
        let hi = (small * big / al).sqrt() * d0
            + (-sigma * t).exp() * big * big * small * small * dc
                / (al * al * (1.0 / (small * al).sqrt() + 1.0 / small.sqrt()));
        if s < lo * (1.0 - ENVELOPE_SLACK) - ENVELOPE_FLOOR
            || s > hi * (1.0 + ENVELOPE_SLACK) + ENVELOPE_FLOOR
        {
            return Err(Error::InvariantViolation(format!(
                "sharpness envelope crossed at t = {t}: {lo:e} <= {s:e} <= {hi:e} fails"
            )));
        }
        scaled.push(s);
        lower.push(lo);
        upper.push(hi);
    }
    Ok(SharpnessReport {
        t_grid: t_grid.to_vec(),
        scaled,
        lower,
        upper,
        constants: k,
    })
}

/// Outcome of [`appendix_inequality_checks`].
#[derive(Clone, Debug, PartialEq)]
pub struct AppendixReport {
    pub trials: usize,
    pub dim: usize,
    pub concavity_violations: usize,
    pub difference_violations: usize,
    /// Largest `lhs − rhs` seen in the concavity check (≤ 0 when it holds).
    pub worst_concavity_excess: f64,
    /// Largest `lhs − rhs` seen in the difference check.
    pub worst_difference_excess: f64,
    /// Largest `‖(M+M₁)^{1/2} − (M+M₂)^{1/2}‖_F / ‖M₁^{1/2} − M₂^{1/2}‖_F`.
    pub worst_frobenius_ratio: f64,
}

impl AppendixReport {
    pub fn passed(&self) -> bool {
        self.concavity_violations == 0 && self.difference_violations == 0
    }
}

/// Number of random unit directions used to estimate `d(·,·)`.
pub const APPENDIX_DIRECTIONS: usize = 1000;

fn random_psd(rng: &mut NoiseStream, d: usize) -> SymMatrix {
    let rank = 1 + (rng.standard_normal().abs() * d as f64) as usize % d;
    let a = rng.normal_matrix(d, rank) * rng.standard_normal().exp();
    SymMatrix::symmetrize(&(&a * a.transpose())).expect("square")
}

fn quad(m: &SymMatrix, x: &DVector<f64>) -> f64 {
    x.dot(&(m.as_matrix() * x)).max(0.0)
}

/// Randomized checks, on PSD triples `(M, M₁, M₂)`, of
///
/// ```text
/// d((M+M₁)^{1/2}, (M+M₂)^{1/2}) ≤ d(M₁^{1/2}, M₂^{1/2})
/// ‖M₁ − M₂‖₂ ≤ (‖M₁^{1/2}‖₂ + ‖M₂^{1/2}‖₂) d(M₁^{1/2}, M₂^{1/2})
/// ```
///
/// with `d(A, B) = sup_{‖x‖=1} |‖Ax‖ − ‖Bx‖|` maximized over random unit
/// vectors and the eigenvectors of the matrices involved.
pub fn appendix_inequality_checks(
    trials: usize,
    dim: usize,
    rng: &mut NoiseStream,
) -> Result<AppendixReport> {
    if trials == 0 || dim == 0 {
        return Err(Error::Validation(
            "trials and dimension must be positive".into(),
        ));
    }
    let slack = 1e-8;
    let mut rep = AppendixReport {
        trials,
        dim,
        concavity_violations: 0,
        difference_violations: 0,
        worst_concavity_excess: f64::NEG_INFINITY,
        worst_difference_excess: f64::NEG_INFINITY,
        worst_frobenius_ratio: 0.0,
    };
    for _ in 0..trials {
        let m = random_psd(rng, dim);
        let m1 = random_psd(rng, dim);
        let m2 = random_psd(rng, dim);

        let mut dirs: Vec<DVector<f64>> = (0..APPENDIX_DIRECTIONS)
            .map(|_| {
                let v = rng.normal_matrix(dim, 1).column(0).into_owned();
                let n = v.norm();
                v / n
            })
            .collect();
        let diff = m1.sub(&m2);
        for s in [&m, &m1, &m2, &diff] {
            let eig = sym_eigen(s)?;
            dirs.extend(eig.vectors.column_iter().map(|c| c.into_owned()));
        }

        let (mut lhs1, mut rhs1) = (0.0f64, 0.0f64);
        for x in &dirs {
            let a = quad(&m, x);
            let (b1, b2) = (quad(&m1, x), quad(&m2, x));
            lhs1 = lhs1.max(((a + b1).sqrt() - (a + b2).sqrt()).abs());
            rhs1 = rhs1.max((b1.sqrt() - b2.sqrt()).abs());
        }
        let excess1 = lhs1 - rhs1;
        rep.worst_concavity_excess = rep.worst_concavity_excess.max(excess1);
        if excess1 > slack * (1.0 + rhs1) {
            rep.concavity_violations += 1;
        }

        let lhs2 = op_norm2(diff.as_matrix());
        let roots = sym_eigen(&m1)?.max().max(0.0).sqrt() + sym_eigen(&m2)?.max().max(0.0).sqrt();
        let rhs2 = roots * rhs1;
        let excess2 = lhs2 - rhs2;
        rep.worst_difference_excess = rep.worst_difference_excess.max(excess2);
        if excess2 > slack * (1.0 + rhs2) {
            rep.difference_violations += 1;
        }

        let r1 = sym_sqrt(&m1)?;
        let r2 = sym_sqrt(&m2)?;
        let den = (r1.as_matrix() - r2.as_matrix()).norm();
        if den > 1e-12 {
            let num =
                (sym_sqrt(&m.add(&m1))?.as_matrix() - sym_sqrt(&m.add(&m2))?.as_matrix()).norm();
            rep.worst_frobenius_ratio = rep.worst_frobenius_ratio.max(num / den);
        }
    }
    Ok(rep)
}

/// `d(A, B)` estimated over the given unit directions.
pub fn metric_estimate(a: &DMatrix<f64>, b: &DMatrix<f64>, dirs: &[DVector<f64>]) -> f64 {
    dirs.iter()
        .map(|x| ((a * x).norm() - (b * x).norm()).abs())
        .fold(0.0, f64::max)
}
