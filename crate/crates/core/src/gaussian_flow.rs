//! Exact Gaussian solutions of the linear Fokker–Planck equation with a
//! prescribed covariance path, and of the self-consistent mean-field equation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{default_step, CovarianceFlow, PropagatorPath};
use crate::problem::Dynamics;
use crate::symmat::{spd_check, SymMatrix, PSD_CLAMP};

/// Largest Simpson panel count chosen automatically.
pub const MAX_PANELS: usize = 100_000;

/// `𝒩(mu, cov)`; `cov` may be singular (Dirac factors).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub mu: DVector<f64>,
    pub cov: SymMatrix,
}

impl GaussianState {
    pub fn new(mu: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mu.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                context: "Gaussian mean vs covariance",
                expected: cov.dim(),
                got: mu.len(),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) || !cov.is_finite() {
            return Err(Error::Validation("Gaussian state must be finite".into()));
        }
        let check = spd_check(&cov, PSD_CLAMP)?;
        if !check.is_spd {
            return Err(Error::Validation(format!(
                "Gaussian covariance must be positive semidefinite (min eigenvalue {:e})",
                check.min_eigenvalue
            )));
        }
        Ok(Self { mu, cov })
    }

    pub fn dirac(mu: DVector<f64>) -> Self {
        let d = mu.len();
        Self {
            mu,
            cov: SymMatrix::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `ceil(64 t)` panels, clamped to `[2, MAX_PANELS]`.
pub fn default_panels(t: f64) -> usize {
    ((64.0 * t).ceil() as usize).clamp(2, MAX_PANELS)
}

fn check_dims(dy: &Dynamics, g: &GaussianState) -> Result<()> {
    if g.dim() != dy.dim() {
        return Err(Error::DimensionMismatch {
            context: "Gaussian state vs problem",
            expected: dy.dim(),
            got: g.dim(),
        });
    }
    Ok(())
}

/// Solution at time `t` of the linear Fokker–Planck equation whose drift and
/// diffusion use the covariance path `C(t)` started from `c0`.
///
/// `μ(t) = u0 + U(0,t)(μ0 − u0)` and
/// `Σ(t) = U(0,t) Σ0 U(0,t)ᵀ + 2σ ∫₀ᵗ U(s,t) C(s) U(s,t)ᵀ ds`, with the integral
/// by composite Simpson on `panels` panels (`2·panels` subintervals).
pub fn propagate_linear_fp(
    dy: &Dynamics,
    c0: &SymMatrix,
    init: &GaussianState,
    t: f64,
    panels: Option<usize>,
) -> Result<GaussianState> {
    check_dims(dy, init)?;
    if !(t >= 0.0) {
        return Err(Error::Validation(format!(
            "time must be non-negative, got {t}"
        )));
    }
    let flow = LinearFlowPath::compute(dy, c0, &[t], panels)?;
    if t == 0.0 {
        return Ok(init.clone());
    }
    flow.state(0, init)
}

/// The linear Fokker–Planck solution operator on an ascending time grid:
/// `U(0,tₖ)` and `∫₀^{tₖ} U(0,s)⁻¹ C(s) U(0,s)⁻ᵀ ds` for every grid time.
#[derive(Clone, Debug)]
pub struct LinearFlowPath {
    times: Vec<f64>,
    u: Vec<DMatrix<f64>>,
    integral: Vec<DMatrix<f64>>,
    sigma: f64,
    u0: DVector<f64>,
}

impl LinearFlowPath {
    /// `panels` Simpson panels per grid interval; by default
    /// [`default_panels`] of the interval length.
    pub fn compute(
        dy: &Dynamics,
        c0: &SymMatrix,
        times: &[f64],
        panels: Option<usize>,
    ) -> Result<Self> {
        if c0.dim() != dy.dim() {
            return Err(Error::DimensionMismatch {
                context: "frozen covariance vs problem",
                expected: dy.dim(),
                got: c0.dim(),
            });
        }
        if panels.is_some_and(|p| p < 2) {
            return Err(Error::Configuration(format!(
                "Simpson quadrature needs at least 2 panels, got {}",
                panels.unwrap_or(0)
            )));
        }
        if times.first().is_some_and(|&t| !(t >= 0.0)) || times.windows(2).any(|w| !(w[1] >= w[0]))
        {
            return Err(Error::Validation(
                "times must be non-negative and ascending".into(),
            ));
        }
        let flow = CovarianceFlow::new(dy, c0)?;
        let sigma = dy.sigma();
        let d = dy.dim();

        // Node list: 0, then 2·P equally spaced nodes per non-empty interval.
        let mut nodes = vec![0.0];
        let mut ends = Vec::with_capacity(times.len());
        let mut prev = 0.0;
        for &t in times {
            let span = t - prev;
            if span > 0.0 {
                if sigma == 0.0 {
                    nodes.push(t);
                } else {
                    let n = 2 * panels.unwrap_or_else(|| default_panels(span));
                    for i in 1..n {
                        nodes.push(prev + span * i as f64 / n as f64);
                    }
                    nodes.push(t);
                }
                prev = t;
            }
            ends.push(nodes.len() - 1);
        }
        let path = PropagatorPath::compute(&flow, &nodes, default_step(dy, c0))?;

        let mut integral = Vec::with_capacity(times.len());
        let mut acc = DMatrix::<f64>::zeros(d, d);
        if sigma > 0.0 {
            let integrand = |k: usize| -> Result<DMatrix<f64>> {
                let inv = path.from_origin(k).clone().try_inverse().ok_or_else(|| {
                    Error::NumericalFailure("propagator U(0, s) is not invertible".into())
                })?;
                let c = flow.at(nodes[k])?;
                Ok(&inv * c.as_matrix() * inv.transpose())
            };
            let mut start = 0;
            let mut f_start = integrand(0)?;
            for &end in &ends {
                let n = end - start;
                if n > 0 {
                    let span = nodes[end] - nodes[start];
                    let mut sum = f_start.clone();
                    for k in 1..=n {
                        let f = integrand(start + k)?;
                        let w = if k == n {
                            1.0
                        } else if k % 2 == 1 {
                            4.0
                        } else {
                            2.0
                        };
                        sum += &f * w;
                        if k == n {
                            f_start = f;
                        }
                    }
                    acc += sum * (span / (3.0 * n as f64));
                    start = end;
                }
                integral.push(acc.clone());
            }
        } else {
            integral.resize(times.len(), acc);
        }
        Ok(LinearFlowPath {
            times: times.to_vec(),
            u: ends.iter().map(|&e| path.from_origin(e).clone()).collect(),
            integral,
            sigma,
            u0: dy.u0().clone(),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `U(0, tₖ)`.
    pub fn propagator(&self, k: usize) -> &DMatrix<f64> {
        &self.u[k]
    }

    /// The solution at `tₖ` started from `init` at time 0.
    pub fn state(&self, k: usize, init: &GaussianState) -> Result<GaussianState> {
        if init.dim() != self.u0.len() {
            return Err(Error::DimensionMismatch {
                context: "Gaussian state vs problem",
                expected: self.u0.len(),
                got: init.dim(),
            });
        }
        let u_t = &self.u[k];
        let mu = &self.u0 + u_t * (&init.mu - &self.u0);
        let mut cov = SymMatrix::congruence(u_t, &init.cov);
        if self.sigma > 0.0 {
            let int = SymMatrix::symmetrize(&self.integral[k])?;
            cov = cov.axpy(2.0 * self.sigma, &SymMatrix::congruence(u_t, &int));
        }
        Ok(GaussianState { mu, cov })
    }
}

/// Solution of the mean-field equation at time `t` from Gaussian data.
pub fn propagate_mean_field(dy: &Dynamics, init: &GaussianState, t: f64) -> Result<GaussianState> {
    let mut path = mean_field_path(dy, init, &[t], None)?;
    Ok(path.pop().expect("one time requested"))
}

/// Mean-field solution at each of the ascending `times`, sharing one
/// propagator integration. `h` defaults to [`default_step`].
pub fn mean_field_path(
    dy: &Dynamics,
    init: &GaussianState,
    times: &[f64],
    h: Option<f64>,
) -> Result<Vec<GaussianState>> {
    check_dims(dy, init)?;
    if times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Validation("times must be non-negative".into()));
    }
    let flow = CovarianceFlow::new(dy, &init.cov)?;
    let h = h.unwrap_or_else(|| default_step(dy, &init.cov));
    let path = PropagatorPath::compute(&flow, times, h)?;
    let u0 = dy.u0();
    let offset = &init.mu - u0;
    times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            Ok(GaussianState {
                mu: u0 + path.from_origin(k) * &offset,
                cov: flow.at(t)?,
            })
        })
        .collect()
}

/// The Gaussian equilibrium `𝒩(u0, σB)`.
pub fn equilibrium(dy: &Dynamics) -> Result<GaussianState> {
    let sigma = dy.sigma();
    if sigma == 0.0 {
        return Err(Error::NoGaussianEquilibrium);
    }
    Ok(GaussianState {
        mu: dy.u0().clone(),
        cov: dy.b().scale(sigma),
    })
}
