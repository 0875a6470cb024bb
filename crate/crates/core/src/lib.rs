//! Mean-field theory of ensemble Kalman inversion and sampling for
//! linear-Gaussian inverse problems.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`symmat`] | symmetric/SPD matrices, Jacobi eigensolver, square roots, norms |
//! | [`problem`] | linear forward model, posterior precision `B⁻¹` and mean `u0`, misfit |
//! | [`moments`] | closed mean/covariance ODEs, closed-form covariance, propagator `U(s,t)`, decay bounds |
//! | [`gaussian_flow`] | exact Gaussian solutions of the linear and mean-field Fokker–Planck flows |
//! | [`wasserstein`] | Gaussian W2 formula, sandwich bounds, optimal maps, empirical W2 via assignment |
//! | [`particles`] | EKI / EKI-SDE / EKS steppers and the coupled linear Fokker–Planck SDE |
//! | [`stability`] | W2 stability reports, decay envelopes, rate fitting, matrix inequality checks |
//!
//! All matrices are dense `nalgebra` values; dimensions are expected to stay
//! below ~50.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod error;
pub mod gaussian_flow;
pub mod moments;
pub mod particles;
pub mod problem;
pub mod stability;
pub mod symmat;
pub mod wasserstein;

pub use error::{Error, Result};
pub use gaussian_flow::GaussianState;
pub use moments::{alpha, BoundConstants, MomentState, Propagator};
pub use particles::{EmpiricalStats, Ensemble, NoiseStream};
pub use problem::{Dynamics, Posterior, ProblemSpec};
pub use stability::{gamma_rate, StabilityReport};
pub use symmat::SymMatrix;
pub use wasserstein::W2Result;

pub use nalgebra::{DMatrix, DVector};
