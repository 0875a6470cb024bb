//! Closed moment system of the mean-field flow.
//!
//! With `δ(t) = mean − u0` and `C(t)` the covariance,
//!
//! ```text
//! δ' = −C B⁻¹ δ
//! C' = −2 C B⁻¹ C + 2σ C
//! ```
//!
//! The covariance equation has the explicit solution
//! `C(t)⁻¹ = a(t) B⁻¹ + e^{−2σt} C0⁻¹` with `a(t) = (1 − e^{−2σt})/σ`
//! (`2t` when `σ = 0`). The mean equation is linear in `δ` and is solved
//! through its fundamental matrix `U(s, t)`, integrated here with classical RK4.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::Dynamics;
use crate::symmat::{is_spd, op_norm2, spd_check, sym_inv, SymMatrix, PSD_CLAMP};

/// `α(t) = 2t + 1` for `σ = 0`, `(1 − e^{−2σt})/σ + e^{−2σt}` otherwise.
pub fn alpha(sigma: f64, t: f64) -> f64 {
    precision_weight(sigma, t) + (-2.0 * sigma * t).exp()
}

/// `β(t) = e^{−2σt}/α(t)`, the weight of `C0⁻¹` in the convex form of `C(t)⁻¹/α(t)`.
pub fn beta(sigma: f64, t: f64) -> f64 {
    (-2.0 * sigma * t).exp() / alpha(sigma, t)
}

/// Weight of `B⁻¹` in `C(t)⁻¹`: `(1 − e^{−2σt})/σ`, continuous at `σ = 0`.
fn precision_weight(sigma: f64, t: f64) -> f64 {
    if sigma == 0.0 {
        2.0 * t
    } else {
        -(-2.0 * sigma * t).exp_m1() / sigma
    }
}

/// The explicit covariance path `t ↦ C(t)` for a fixed `C0`.
#[derive(Clone, Debug)]
pub struct CovarianceFlow {
    sigma: f64,
    b_inv: SymMatrix,
    c0: SymMatrix,
    c0_inv: SymMatrix,
}

impl CovarianceFlow {
    pub fn new(dy: &Dynamics, c0: &SymMatrix) -> Result<Self> {
        if c0.dim() != dy.dim() {
            return Err(Error::DimensionMismatch {
                context: "initial covariance",
                expected: dy.dim(),
                got: c0.dim(),
            });
        }
        if !is_spd(c0) {
            return Err(Error::Validation(
                "initial covariance must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            sigma: dy.sigma(),
            b_inv: dy.b_inv().clone(),
            c0: c0.clone(),
            c0_inv: sym_inv(c0)?,
        })
    }

    pub fn initial(&self) -> &SymMatrix {
        &self.c0
    }

    /// `C(t)⁻¹`.
    pub fn precision_at(&self, t: f64) -> SymMatrix {
        let a = precision_weight(self.sigma, t);
        let e = (-2.0 * self.sigma * t).exp();
        self.b_inv.scale(a).axpy(e, &self.c0_inv)
    }

    /// `C(t)`.
    pub fn at(&self, t: f64) -> Result<SymMatrix> {
        if t == 0.0 {
            return Ok(self.c0.clone());
        }
        sym_inv(&self.precision_at(t))
    }
}

/// `C(t)` from the explicit solution of the covariance equation.
pub fn covariance_closed_form(dy: &Dynamics, c0: &SymMatrix, t: f64) -> Result<SymMatrix> {
    if !(t >= 0.0) {
        return Err(Error::Validation(format!(
            "time must be non-negative, got {t}"
        )));
    }
    CovarianceFlow::new(dy, c0)?.at(t)
}

/// `(δ, C)` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub t: f64,
    pub delta: DVector<f64>,
    pub c: SymMatrix,
}

impl MomentState {
    pub fn new(t: f64, delta: DVector<f64>, c: SymMatrix) -> Result<Self> {
        if delta.len() != c.dim() {
            return Err(Error::DimensionMismatch {
                context: "moment state",
                expected: c.dim(),
                got: delta.len(),
            });
        }
        Ok(Self { t, delta, c })
    }
}

/// Right-hand side of the moment ODEs, with `dC` symmetrized.
pub fn moment_rhs(dy: &Dynamics, st: &MomentState) -> (DVector<f64>, SymMatrix) {
    let cb = st.c.as_matrix() * dy.b_inv().as_matrix();
    let ddelta = -(&cb * &st.delta);
    let cbc = &cb * st.c.as_matrix();
    let dc = -(&cbc + cbc.transpose()) + st.c.as_matrix() * (2.0 * dy.sigma());
    let dc = SymMatrix::symmetrize(&dc).expect("square");
    (ddelta, dc)
}

/// Default RK4 step `1e−3·min(1, 1/(‖B⁻¹‖₂‖C0‖₂))`.
pub fn default_step(dy: &Dynamics, c0: &SymMatrix) -> f64 {
    let stiff = op_norm2(dy.b_inv().as_matrix()) * op_norm2(c0.as_matrix());
    if stiff > 0.0 {
        1e-3 * (1.0 / stiff).min(1.0)
    } else {
        1e-3
    }
}

fn rk4_moment_step(dy: &Dynamics, st: &MomentState, h: f64) -> MomentState {
    let shifted = |dd: &DVector<f64>, dc: &SymMatrix, w: f64| MomentState {
        t: st.t + w,
        delta: &st.delta + dd * w,
        c: st.c.axpy(w, dc),
    };
    let (d1, c1) = moment_rhs(dy, st);
    let (d2, c2) = moment_rhs(dy, &shifted(&d1, &c1, 0.5 * h));
    let (d3, c3) = moment_rhs(dy, &shifted(&d2, &c2, 0.5 * h));
    let (d4, c4) = moment_rhs(dy, &shifted(&d3, &c3, h));
    let delta = &st.delta + (d1 + (d2 + d3) * 2.0 + d4) * (h / 6.0);
    let dc = c1.as_matrix().clone() + (c2.as_matrix() + c3.as_matrix()) * 2.0 + c4.as_matrix();
    let c = SymMatrix::symmetrize(&(st.c.as_matrix() + dc * (h / 6.0))).expect("square");
    MomentState {
        t: st.t + h,
        delta,
        c,
    }
}

fn check_covariance(st: &MomentState) -> Result<()> {
    if !st.c.is_finite() || st.delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationFailure {
            t: st.t,
            reason: "state became non-finite".into(),
        });
    }
    if is_spd(&st.c) {
        return Ok(());
    }
    let check = spd_check(&st.c, PSD_CLAMP)?;
    if check.is_spd {
        Ok(())
    } else {
        Err(Error::IntegrationFailure {
            t: st.t,
            reason: format!(
                "covariance lost positive definiteness (min eigenvalue {:e}); reduce the step",
                check.min_eigenvalue
            ),
        })
    }
}

/// Classical RK4 with fixed step `h`; the last step is shortened to land on `t_end`.
pub fn integrate_moments(
    dy: &Dynamics,
    init: &MomentState,
    t_end: f64,
    h: f64,
) -> Result<MomentState> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    if !(t_end >= init.t) {
        return Err(Error::Validation(format!(
            "t_end = {t_end} precedes the initial time {}",
            init.t
        )));
    }
    if init.delta.len() != dy.dim() || init.c.dim() != dy.dim() {
        return Err(Error::DimensionMismatch {
            context: "moment state vs problem",
            expected: dy.dim(),
            got: init.c.dim(),
        });
    }
    let t0 = init.t;
    let span = t_end - t0;
    let full = (span / h).floor() as u64;
    let mut st = init.clone();
    for k in 0..full {
        st = rk4_moment_step(dy, &st, h);
        st.t = t0 + (k + 1) as f64 * h;
        check_covariance(&st)?;
    }
    let rest = t_end - st.t;
    if rest > 1e-12 * h {
        st = rk4_moment_step(dy, &st, rest);
        check_covariance(&st)?;
    }
    st.t = t_end;
    Ok(st)
}

/// Integrates through an ascending list of output times and returns the state at each.
pub fn integrate_moments_through(
    dy: &Dynamics,
    init: &MomentState,
    times: &[f64],
    h: f64,
) -> Result<Vec<MomentState>> {
    let mut out = Vec::with_capacity(times.len());
    let mut st = init.clone();
    for &t in times {
        st = integrate_moments(dy, &st, t, h)?;
        out.push(st.clone());
    }
    Ok(out)
}

/// Fundamental matrix `U(s, t)` of `∂_t U = −C(t) B⁻¹ U`, `U(s, s) = I`.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub s: f64,
    pub t: f64,
    pub u: DMatrix<f64>,
}

/// `U(0, τ)` at an ascending list of checkpoints, from a single RK4 pass.
///
/// Between checkpoints the step is the largest value `≤ h` that divides the
/// segment evenly.
#[derive(Clone, Debug)]
pub struct PropagatorPath {
    times: Vec<f64>,
    u: Vec<DMatrix<f64>>,
}

impl PropagatorPath {
    pub fn compute(flow: &CovarianceFlow, checkpoints: &[f64], h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Validation(format!("step must be positive, got {h}")));
        }
        if checkpoints.first().is_some_and(|&t| !(t >= 0.0))
            || checkpoints.windows(2).any(|w| !(w[1] >= w[0]))
        {
            return Err(Error::Validation(
                "propagator checkpoints must be non-negative and ascending".into(),
            ));
        }
        let d = flow.c0.dim();
        let b_inv = flow.b_inv.as_matrix();
        let drift = |tau: f64| -> Result<DMatrix<f64>> { Ok(flow.at(tau)?.as_matrix() * b_inv) };

        let mut u = DMatrix::identity(d, d);
        let mut tau = 0.0;
        let mut a_now = drift(0.0)?;
        let mut times = Vec::with_capacity(checkpoints.len());
        let mut us = Vec::with_capacity(checkpoints.len());
        for &target in checkpoints {
            let span = target - tau;
            if span > 0.0 {
                let n = (span / h).ceil().max(1.0) as u64;
                let step = span / n as f64;
                let start = tau;
                for k in 0..n {
                    let t_k = start + k as f64 * step;
                    let t_next = if k + 1 == n {
                        target
                    } else {
                        start + (k + 1) as f64 * step
                    };
                    let a_mid = drift(t_k + 0.5 * step)?;
                    let a_end = drift(t_next)?;
                    let k1 = -(&a_now * &u);
                    let k2 = -(&a_mid * (&u + &k1 * (0.5 * step)));
                    let k3 = -(&a_mid * (&u + &k2 * (0.5 * step)));
                    let k4 = -(&a_end * (&u + &k3 * step));
                    u += (k1 + (k2 + k3) * 2.0 + k4) * (step / 6.0);
                    a_now = a_end;
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::IntegrationFailure {
                        t: target,
                        reason: "propagator became non-finite".into(),
                    });
                }
                tau = target;
            }
            times.push(target);
            us.push(u.clone());
        }
        Ok(Self { times, u: us })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `U(0, τ_k)`.
    pub fn from_origin(&self, k: usize) -> &DMatrix<f64> {
        &self.u[k]
    }

    /// `U(τ_i, τ_j) = U(0, τ_j) U(0, τ_i)⁻¹` for `i ≤ j`.
    pub fn between(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        if i == j {
            let d = self.u[i].nrows();
            return Ok(DMatrix::identity(d, d));
        }
        let inv = self.u[i].clone().try_inverse().ok_or_else(|| {
            Error::NumericalFailure("propagator U(0, s) is not invertible".into())
        })?;
        Ok(&self.u[j] * inv)
    }
}

/// `U(s, t)` for the covariance flow started at `c0`.
pub fn propagator(dy: &Dynamics, c0: &SymMatrix, s: f64, t: f64, h: f64) -> Result<Propagator> {
    if !(s >= 0.0 && t >= s) {
        return Err(Error::Validation(format!(
            "propagator needs 0 <= s <= t, got s = {s}, t = {t}"
        )));
    }
    let flow = CovarianceFlow::new(dy, c0)?;
    if s == t {
        let d = c0.dim();
        return Ok(Propagator {
            s,
            t,
            u: DMatrix::identity(d, d),
        });
    }
    let path = PropagatorPath::compute(&flow, &[s, t], h)?;
    let u = if s == 0.0 {
        path.from_origin(1).clone()
    } else {
        path.between(0, 1)?
    };
    Ok(Propagator { s, t, u })
}

/// Upper bound on `‖U(s,t)‖₂`:
/// `e^{−σ(t−s)} √(α(s)/α(t)) √max(‖C0‖,‖B‖) √max(‖C0⁻¹‖,‖B⁻¹‖)`.
pub fn propagator_norm_bound(dy: &Dynamics, c0: &SymMatrix, s: f64, t: f64) -> Result<f64> {
    let sigma = dy.sigma();
    let big = c0.spectral_radius()?.max(dy.b().spectral_radius()?);
    let small = sym_inv(c0)?
        .spectral_radius()?
        .max(dy.b_inv().spectral_radius()?);
    Ok(
        (-sigma * (t - s)).exp()
            * (alpha(sigma, s) / alpha(sigma, t)).sqrt()
            * (big * small).sqrt(),
    )
}

/// Constants `M`, `m`, `R` bounding a pair of initial moment states:
/// `M ≥ ‖Cᵢ(0)‖₂, ‖B‖₂`, `m ≥ ‖Cᵢ(0)⁻¹‖₂, ‖B⁻¹‖₂`, `R ≥ ‖δᵢ(0)‖`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConstants {
    pub big_m: f64,
    pub small_m: f64,
    pub r: f64,
}

impl BoundConstants {
    pub fn new(big_m: f64, small_m: f64, r: f64) -> Result<Self> {
        if !(big_m > 0.0 && small_m > 0.0 && r > 0.0) {
            return Err(Error::Validation(format!(
                "bound constants must be positive (M = {big_m}, m = {small_m}, R = {r})"
            )));
        }
        // ‖A‖‖A⁻¹‖ ≥ 1 for any admissible A, so mM < 1 cannot bound anything.
        if big_m * small_m < 1.0 - 1e-12 {
            return Err(Error::Validation(format!(
                "bound constants violate m·M >= 1 (m·M = {})",
                big_m * small_m
            )));
        }
        Ok(Self { big_m, small_m, r })
    }

    /// Tightest constants for the pair. `R` is floored at a tiny positive
    /// value so that two states at `u0` still produce valid constants.
    pub fn for_pair(dy: &Dynamics, a: &MomentState, b: &MomentState) -> Result<Self> {
        let big_m =
            a.c.spectral_radius()?
                .max(b.c.spectral_radius()?)
                .max(dy.b().spectral_radius()?);
        let small_m = sym_inv(&a.c)?
            .spectral_radius()?
            .max(sym_inv(&b.c)?.spectral_radius()?)
            .max(dy.b_inv().spectral_radius()?);
        let r = a.delta.norm().max(b.delta.norm()).max(f64::MIN_POSITIVE);
        Self::new(big_m, small_m, r)
    }

    /// Checks that the constants bound the pair (relative slack `1e-12`).
    pub fn validate_for(&self, dy: &Dynamics, a: &MomentState, b: &MomentState) -> Result<()> {
        let tight = Self::for_pair(dy, a, b)?;
        let ok = |bound: f64, actual: f64| actual <= bound * (1.0 + 1e-12);
        if !ok(self.big_m, tight.big_m) {
            return Err(Error::Validation(format!(
                "M = {} does not bound the covariances (need {})",
                self.big_m, tight.big_m
            )));
        }
        if !ok(self.small_m, tight.small_m) {
            return Err(Error::Validation(format!(
                "m = {} does not bound the precisions (need {})",
                self.small_m, tight.small_m
            )));
        }
        if a.delta.norm().max(b.delta.norm()) > self.r * (1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "R = {} does not bound the mean offsets",
                self.r
            )));
        }
        Ok(())
    }
}

/// Decay bounds for two solutions started at `a`, `b` (both at `t = 0`):
/// returns `(bound on ‖C₁(t) − C₂(t)‖_F, bound on ‖δ₁(t) − δ₂(t)‖)`.
pub fn moment_decay_bounds(
    dy: &Dynamics,
    a: &MomentState,
    b: &MomentState,
    consts: &BoundConstants,
    t: f64,
) -> Result<(f64, f64)> {
    consts.validate_for(dy, a, b)?;
    let (big, small, r) = (consts.big_m, consts.small_m, consts.r);
    let sigma = dy.sigma();
    let al = alpha(sigma, t);
    let dc = (a.c.as_matrix() - b.c.as_matrix()).norm();
    let dd = (&a.delta - &b.delta).norm();
    let cov_bound = big.powi(2) * small.powi(2) * dc * (-2.0 * sigma * t).exp() / (al * al);
    let mean_bound = ((small * big).sqrt() * dd + 0.5 * small.powi(4) * big.powi(3) * r * dc)
        * (-sigma * t).exp()
        / al.sqrt();
    Ok((cov_bound, mean_bound))
}

/// Bound on `‖U₂(s,t) − U₁(s,t)‖₂` for propagators of two covariance flows:
/// `m⁴M³‖C₂(0) − C₁(0)‖_F e^{−σ(s+t)}/√(α(s)α(t))`.
pub fn propagator_contraction_bound(
    dy: &Dynamics,
    consts: &BoundConstants,
    c1: &SymMatrix,
    c2: &SymMatrix,
    s: f64,
    t: f64,
) -> f64 {
    let sigma = dy.sigma();
    let dc = (c2.as_matrix() - c1.as_matrix()).norm();
    consts.small_m.powi(4) * consts.big_m.powi(3) * dc * (-sigma * (s + t)).exp()
        / (alpha(sigma, s) * alpha(sigma, t)).sqrt()
}
