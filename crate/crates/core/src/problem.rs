//! Linear-Gaussian inverse problem `y = G u + η`, `η ~ N(0, Γ)`, prior `N(0, Γ0)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::symmat::{is_spd, sym_inv, SymMatrix};

/// Forward model, noise and prior covariances, and the observation.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    g: DMatrix<f64>,
    gamma: SymMatrix,
    gamma0: SymMatrix,
    y: DVector<f64>,
    gamma_inv: SymMatrix,
    gamma0_inv: SymMatrix,
}

impl ProblemSpec {
    /// `g` is `K × d`, `gamma` is `K × K`, `gamma0` is `d × d`, `y` has length `K`.
    pub fn new(
        g: DMatrix<f64>,
        gamma: SymMatrix,
        gamma0: SymMatrix,
        y: DVector<f64>,
    ) -> Result<Self> {
        let (k, d) = g.shape();
        if d == 0 || k == 0 {
            return Err(Error::Validation("forward map G must be non-empty".into()));
        }
        if gamma.dim() != k {
            return Err(Error::DimensionMismatch {
                context: "Gamma (noise covariance) vs rows of G",
                expected: k,
                got: gamma.dim(),
            });
        }
        if gamma0.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "Gamma0 (prior covariance) vs columns of G",
                expected: d,
                got: gamma0.dim(),
            });
        }
        if y.len() != k {
            return Err(Error::DimensionMismatch {
                context: "observation y vs rows of G",
                expected: k,
                got: y.len(),
            });
        }
        if !g.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("G and y must be finite".into()));
        }
        if !is_spd(&gamma) {
            return Err(Error::Validation(
                "Gamma must be symmetric positive definite".into(),
            ));
        }
        if !is_spd(&gamma0) {
            return Err(Error::Validation(
                "Gamma0 must be symmetric positive definite".into(),
            ));
        }
        let gamma_inv = sym_inv(&gamma)?;
        let gamma0_inv = sym_inv(&gamma0)?;
        Ok(Self {
            g,
            gamma,
            gamma0,
            y,
            gamma_inv,
            gamma0_inv,
        })
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    /// Observation dimension `K`.
    pub fn obs_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn forward(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn gamma(&self) -> &SymMatrix {
        &self.gamma
    }

    pub fn gamma0(&self) -> &SymMatrix {
        &self.gamma0
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn gamma_inv(&self) -> &SymMatrix {
        &self.gamma_inv
    }

    pub fn gamma0_inv(&self) -> &SymMatrix {
        &self.gamma0_inv
    }
}

/// Posterior precision `B⁻¹ = Γ0⁻¹ + GᵀΓ⁻¹G`, its inverse `B`, and the
/// minimizer `u0 = B Gᵀ Γ⁻¹ y` of the regularized misfit.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub b_inv: SymMatrix,
    pub b: SymMatrix,
    pub u0: DVector<f64>,
}

pub fn build_posterior(p: &ProblemSpec) -> Result<Posterior> {
    let gt_gamma_inv = p.g.transpose() * p.gamma_inv.as_matrix();
    let b_inv = SymMatrix::symmetrize(&(&gt_gamma_inv * &p.g + p.gamma0_inv.as_matrix()))?;
    let b = sym_inv(&b_inv)?;
    let u0 = b.as_matrix() * (gt_gamma_inv * &p.y);
    Ok(Posterior { b_inv, b, u0 })
}

/// A problem together with the diffusion strength `σ ≥ 0` of the mean-field flow.
#[derive(Clone, Debug)]
pub struct Dynamics {
    pub problem: ProblemSpec,
    pub posterior: Posterior,
    sigma: f64,
}

impl Dynamics {
    pub fn new(problem: ProblemSpec, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be finite and non-negative, got {sigma}"
            )));
        }
        let posterior = build_posterior(&problem)?;
        Ok(Self {
            problem,
            posterior,
            sigma,
        })
    }

    /// Same problem, different `σ`.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            ..self.clone()
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn b(&self) -> &SymMatrix {
        &self.posterior.b
    }

    pub fn b_inv(&self) -> &SymMatrix {
        &self.posterior.b_inv
    }

    pub fn u0(&self) -> &DVector<f64> {
        &self.posterior.u0
    }

    /// `Φ_R(u) = ½‖y − Gu‖²_Γ + ½‖u‖²_Γ0` with `‖v‖²_A = vᵀA⁻¹v`.
    pub fn misfit(&self, u: &DVector<f64>) -> Result<f64> {
        self.check_dim(u)?;
        let p = &self.problem;
        let r = &p.y - &p.g * u;
        let data = r.dot(&(p.gamma_inv.as_matrix() * &r));
        let prior = u.dot(&(p.gamma0_inv.as_matrix() * u));
        Ok(0.5 * data + 0.5 * prior)
    }

    /// `∇Φ_R(u) = GᵀΓ⁻¹(Gu − y) + Γ0⁻¹u`.
    pub fn grad_misfit(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        let p = &self.problem;
        let r = &p.g * u - &p.y;
        Ok(p.g.transpose() * (p.gamma_inv.as_matrix() * r) + p.gamma0_inv.as_matrix() * u)
    }

    /// The same gradient through the posterior: `B⁻¹(u − u0)`.
    pub fn grad_misfit_posterior(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        Ok(self.posterior.b_inv.as_matrix() * (u - &self.posterior.u0))
    }

    fn check_dim(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(())
    }
}
