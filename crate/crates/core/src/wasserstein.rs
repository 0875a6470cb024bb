//! Wasserstein-2 distances: the closed form between Gaussians, its sandwich
//! bounds, optimal linear maps, linear pushforward factors and the exact
//! empirical distance between equal-size point clouds.

use nalgebra::{DMatrix, DVector};

use crate::assignment;
use crate::error::{Error, Result};
use crate::gaussian_flow::GaussianState;
use crate::symmat::{op_norm2, spd_check, sym_eigen, sym_sqrt, SymMatrix, PSD_CLAMP};

/// Default largest point-cloud size accepted by [`w2_empirical`].
pub const EMPIRICAL_CAP: usize = 4096;

/// Below this `λmin/λmax` the source covariance counts as singular.
const SOURCE_CONDITION: f64 = 1e-8;

/// `distance² = mean_part + trace_part`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct W2Result {
    pub distance: f64,
    pub mean_part: f64,
    pub trace_part: f64,
}

impl W2Result {
    pub fn squared(&self) -> f64 {
        self.mean_part + self.trace_part
    }
}

fn check_pair(a: &GaussianState, b: &GaussianState) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "Gaussian pair",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    for g in [a, b] {
        let check = spd_check(&g.cov, PSD_CLAMP)?;
        if !check.is_spd {
            return Err(Error::Validation(format!(
                "covariance is not positive semidefinite (min eigenvalue {:e})",
                check.min_eigenvalue
            )));
        }
    }
    Ok(())
}

/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}` given `Σ₁^{1/2}`, symmetrized.
fn sandwich_product(root: &SymMatrix, other: &SymMatrix) -> Result<SymMatrix> {
    SymMatrix::symmetrize(&(root.as_matrix() * other.as_matrix() * root.as_matrix()))
}

/// Linear part of the optimal map from `𝒩(·, src)` to `𝒩(·, dst)`; `None` if `src` is singular.
fn optimal_linear(src: &SymMatrix, dst: &SymMatrix) -> Result<Option<DMatrix<f64>>> {
    let eig = sym_eigen(src)?;
    if !(eig.min() > SOURCE_CONDITION * eig.max()) {
        return Ok(None);
    }
    let root = eig.map(f64::sqrt);
    let inv_root = eig.map(|l| 1.0 / l.sqrt());
    let inner = sym_sqrt(&sandwich_product(&root, dst)?)?;
    Ok(Some(
        inv_root.as_matrix() * inner.as_matrix() * inv_root.as_matrix(),
    ))
}

fn condition_ratio(m: &SymMatrix) -> Result<f64> {
    let eig = sym_eigen(m)?;
    Ok(if eig.max() > 0.0 {
        eig.min() / eig.max()
    } else {
        0.0
    })
}

/// Closed-form W2 between two Gaussians.
///
/// When either covariance is well conditioned the trace term is evaluated as
/// the transport cost `tr((I − T) Σ (I − T)ᵀ)` of the optimal map from that
/// side, which is accurate for nearly equal covariances. Otherwise the trace
/// formula is used and clamped at zero.
pub fn w2_gaussian(a: &GaussianState, b: &GaussianState) -> Result<W2Result> {
    check_pair(a, b)?;
    let mean_part = (&a.mu - &b.mu).norm_squared();
    if a.cov == b.cov {
        return Ok(W2Result {
            distance: mean_part.sqrt(),
            mean_part,
            trace_part: 0.0,
        });
    }
    let (src, dst) = if condition_ratio(&b.cov)? > condition_ratio(&a.cov)? {
        (&b.cov, &a.cov)
    } else {
        (&a.cov, &b.cov)
    };
    let trace_part = match optimal_linear(src, dst)? {
        Some(t) => {
            let d = src.dim();
            let resid = DMatrix::identity(d, d) - t;
            SymMatrix::congruence(&resid, src).trace().max(0.0)
        }
        None => {
            let root = sym_sqrt(src)?;
            let inner = sym_sqrt(&sandwich_product(&root, dst)?)?;
            (src.trace() + dst.trace() - 2.0 * inner.trace()).max(0.0)
        }
    };
    Ok(W2Result {
        distance: (mean_part + trace_part).sqrt(),
        mean_part,
        trace_part,
    })
}

/// `(lower, upper)` bounds on `W2²`:
/// `‖Δμ‖² + ½‖Σ₁^{1/2} − Σ₂^{1/2}‖_F²` and `‖Δμ‖² + ‖Σ₁^{1/2} − Σ₂^{1/2}‖_F²`.
pub fn w2_gaussian_sandwich(a: &GaussianState, b: &GaussianState) -> Result<(f64, f64)> {
    check_pair(a, b)?;
    let mean_part = (&a.mu - &b.mu).norm_squared();
    let gap = (sym_sqrt(&a.cov)?.as_matrix() - sym_sqrt(&b.cov)?.as_matrix()).norm_squared();
    Ok((mean_part + 0.5 * gap, mean_part + gap))
}

/// Optimal map `x ↦ shift + linear·x` pushing `a` onto `b`.
pub fn gaussian_optimal_map(
    a: &GaussianState,
    b: &GaussianState,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_pair(a, b)?;
    let linear = optimal_linear(&a.cov, &b.cov)?.ok_or(Error::DegenerateSource)?;
    let shift = &b.mu - &linear * &a.mu;
    Ok((linear, shift))
}

/// `‖A‖₂`, the factor by which a linear pushforward can stretch W2.
pub fn w2_pushforward_factor(a: &DMatrix<f64>) -> f64 {
    op_norm2(a)
}

/// `‖A − B‖₂ √(tr 𝒞 + ‖ℳ‖²)`, a bound on `W2(A♯f, B♯f)` for `f` with mean
/// `ℳ` and covariance `𝒞`.
pub fn w2_same_density_linear_bound(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &SymMatrix,
) -> Result<f64> {
    if a.shape() != b.shape() || a.ncols() != mean.len() || cov.dim() != mean.len() {
        return Err(Error::DimensionMismatch {
            context: "linear maps vs moments",
            expected: mean.len(),
            got: a.ncols(),
        });
    }
    Ok(op_norm2(&(a - b)) * (cov.trace() + mean.norm_squared()).max(0.0).sqrt())
}

/// Exact W2 between the uniform measures on the rows of `x` and `y` (`J × d`).
pub fn w2_empirical(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    w2_empirical_with_cap(x, y, EMPIRICAL_CAP)
}

pub fn w2_empirical_with_cap(x: &DMatrix<f64>, y: &DMatrix<f64>, cap: usize) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Validation(format!(
            "point sets must have equal size ({} vs {})",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            context: "point set dimension",
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::Validation("point sets must be non-empty".into()));
    }
    if n > cap {
        return Err(Error::Resource(format!(
            "{n} points exceed the assignment cap of {cap}"
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("points must be finite".into()));
    }
    if d == 1 {
        let mut xs: Vec<f64> = x.iter().copied().collect();
        let mut ys: Vec<f64> = y.iter().copied().collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let total: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok((total / n as f64).sqrt());
    }
    Ok((assignment_cost(x, y)? / n as f64).sqrt())
}

fn assignment_cost(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let (n, d) = x.shape();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                let diff = x[(i, k)] - y[(j, k)];
                s += diff * diff;
            }
            cost[i * n + j] = s;
        }
    }
    Ok(assignment::solve(&cost, n)?.1)
}
