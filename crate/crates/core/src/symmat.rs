//! Dense symmetric matrices and the spectral toolkit built on them.
//!
//! Every covariance-like quantity in the crate (`C`, `Σ`, `B`, `Γ`, `Γ0`) is a
//! [`SymMatrix`]. Symmetry is exact: constructors copy or average triangles so
//! that `m[(i, j)] == m[(j, i)]` bit-for-bit.
//!
//! Eigendecompositions use cyclic Jacobi rotations. They are slow for large
//! matrices but accurate to a few ulps for the small dimensions used here,
//! and fully deterministic.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance below which negative eigenvalues are clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

/// Sweep cap for the cyclic Jacobi eigensolver.
pub const MAX_SWEEPS: usize = 100;

/// A real symmetric matrix of dimension `dim >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from the upper triangle of `m`; the lower
    /// triangle is ignored.
    pub fn from_upper(mut m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let d = m.nrows();
        for j in 0..d {
            for i in (j + 1)..d {
                m[(i, j)] = m[(j, i)];
            }
        }
        Ok(Self { m })
    }

    /// Symmetric part `(m + mᵀ)/2`. Used to absorb round-off asymmetry.
    pub fn symmetrize(m: &DMatrix<f64>) -> Result<Self> {
        check_square(m)?;
        let d = m.nrows();
        let mut out = m.clone();
        for j in 0..d {
            for i in (j + 1)..d {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(Self { m: out })
    }

    /// Accepts `m` only if it is symmetric to within `tol` in max-abs entry,
    /// then symmetrizes it.
    pub fn try_from_symmetric(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        check_square(&m)?;
        let d = m.nrows();
        let scale = m.amax().max(1.0);
        for j in 0..d {
            for i in (j + 1)..d {
                if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                    return Err(Error::Validation(format!(
                        "matrix is not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Self::symmetrize(&m)
    }

    pub fn identity(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self {
            m: DMatrix::identity(d, d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self {
            m: DMatrix::zeros(d, d),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "dimension must be positive");
        Self {
            m: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    /// `a · s · aᵀ`, symmetrized. `a` may be rectangular.
    pub fn congruence(a: &DMatrix<f64>, s: &SymMatrix) -> Self {
        let prod = a * &s.m * a.transpose();
        Self::symmetrize(&prod).expect("congruence of a square matrix is square")
    }

    /// Outer product `v vᵀ`.
    pub fn outer(v: &DVector<f64>) -> Self {
        Self {
            m: v * v.transpose(),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { m: &self.m * c }
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        Self {
            m: &self.m + &other.m,
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        Self {
            m: &self.m - &other.m,
        }
    }

    /// `self + c·other`.
    pub fn axpy(&self, c: f64, other: &SymMatrix) -> Self {
        Self {
            m: &self.m + &other.m * c,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    /// Largest absolute eigenvalue, which is the operator 2-norm of a symmetric matrix.
    pub fn spectral_radius(&self) -> Result<f64> {
        let eig = sym_eigen(self)?;
        Ok(eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }

    /// Upper triangle in row-major order: `m11, m12, …, m1d, m22, …, mdd`.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                out.push(self.m[(i, j)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::Validation(
            "matrix dimension must be at least 1".into(),
        ));
    }
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "square matrix",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    Ok(())
}

/// Eigendecomposition `m = V diag(λ) Vᵀ` with eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Orthogonal matrix whose columns are the eigenvectors.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map(|x| x).into_matrix()
    }

    /// Spectral function `V diag(f(λ)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..d {
            let fk = f(self.values[k]);
            scaled.column_mut(k).scale_mut(fk);
        }
        let prod = scaled * self.vectors.transpose();
        SymMatrix::symmetrize(&prod).expect("square by construction")
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn spectral_radius(&self) -> f64 {
        self.min().abs().max(self.max().abs())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigen(m: &SymMatrix) -> Result<SymEigen> {
    let d = m.dim();
    if !m.is_finite() {
        return Err(Error::NumericalFailure(
            "eigendecomposition of a non-finite matrix".into(),
        ));
    }
    // Row-major working copy.
    let mut a: Vec<f64> = (0..d * d).map(|k| m.m[(k / d, k % d)]).collect();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob = m.m.norm();

    let mut converged = d == 1 || frob == 0.0;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= f64::EPSILON * d as f64 * frob {
            converged = true;
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                // Skip rotations that cannot change the diagonal.
                if sweep > 3 && apq.abs() * 1e18 < app.abs().min(aqq.abs()) {
                    a[p * d + q] = 0.0;
                    a[q * d + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
    }
    if !converged {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        // Slow final convergence is fine as long as the residual is at round-off level.
        if off.sqrt() > 1e-13 * frob {
            return Err(Error::NumericalFailure(format!(
                "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (off-diagonal {:e})",
                off.sqrt()
            )));
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i * d + i].total_cmp(&a[j * d + j]));
    let values = DVector::from_iterator(d, order.iter().map(|&k| a[k * d + k]));
    let vectors = DMatrix::from_fn(d, d, |i, j| v[i * d + order[j]]);
    Ok(SymEigen { values, vectors })
}

/// Principal square root of a positive semidefinite matrix.
///
/// Eigenvalues in `[-PSD_CLAMP·‖m‖₂, 0)` are clamped to zero.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(m)?;
    let tol = PSD_CLAMP * eig.spectral_radius();
    if eig.min() < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.min(),
            tolerance: tol,
        });
    }
    Ok(eig.map(|x| x.max(0.0).sqrt()))
}

/// Inverse principal square root of a positive definite matrix.
pub fn sym_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(m)?;
    if eig.min() <= 0.0 {
        return Err(Error::Singular {
            min_eigenvalue: eig.min(),
        });
    }
    Ok(eig.map(|x| 1.0 / x.sqrt()))
}

/// Inverse of a symmetric positive definite matrix (Cholesky based).
pub fn sym_inv(m: &SymMatrix) -> Result<SymMatrix> {
    match Cholesky::new(m.m.clone()) {
        Some(chol) => {
            let inv = chol.inverse();
            if inv.iter().all(|v| v.is_finite()) {
                return SymMatrix::symmetrize(&inv);
            }
            Err(Error::Singular {
                min_eigenvalue: 0.0,
            })
        }
        None => {
            let min_eigenvalue = sym_eigen(m).map(|e| e.min()).unwrap_or(f64::NAN);
            Err(Error::Singular { min_eigenvalue })
        }
    }
}

/// Operator 2-norm (largest singular value) of an arbitrary matrix.
pub fn op_norm2(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let gram = SymMatrix::symmetrize(&gram).expect("Gram matrix is square");
    match sym_eigen(&gram) {
        Ok(eig) => eig.max().max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// Frobenius norm `sqrt(Σ m_ij²)`.
pub fn frobenius_norm(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Result of a definiteness test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpdCheck {
    pub min_eigenvalue: f64,
    pub is_spd: bool,
    pub tolerance: f64,
}

/// `is_spd ⇔ λ_min > -tol·max(1, ‖m‖₂)`.
///
/// With `tol = 0` this is strict positive definiteness.
pub fn spd_check(m: &SymMatrix, tol: f64) -> Result<SpdCheck> {
    let eig = sym_eigen(m)?;
    let threshold = -tol * eig.spectral_radius().max(1.0);
    Ok(SpdCheck {
        min_eigenvalue: eig.min(),
        is_spd: eig.min() > threshold,
        tolerance: tol,
    })
}

/// Strictly positive definite and finite.
pub fn is_spd(m: &SymMatrix) -> bool {
    m.is_finite() && Cholesky::new(m.m.clone()).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut impl Rng, d: usize) -> SymMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetrize(&(&a + a.transpose())).unwrap()
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> SymMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        SymMatrix::symmetrize(&m).unwrap()
    }

    #[test]
    fn eigen_of_identity() {
        let eig = sym_eigen(&SymMatrix::identity(3)).unwrap();
        assert_eq!(eig.values.as_slice(), &[1.0, 1.0, 1.0]);
        let vtv = eig.vectors.transpose() * &eig.vectors;
        assert_abs_diff_eq!(vtv, DMatrix::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn eigen_of_diagonal() {
        let eig = sym_eigen(&SymMatrix::from_diagonal(&[9.0, 4.0])).unwrap();
        assert_eq!(eig.values.as_slice(), &[4.0, 9.0]);
        for j in 0..2 {
            let col = eig.vectors.column(j);
            assert_eq!(col.iter().filter(|v| v.abs() == 1.0).count(), 1);
        }
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_symmetric(&mut rng, 5);
            let eig = sym_eigen(&m).unwrap();
            let err = (eig.reconstruct() - m.as_matrix()).norm() / m.frobenius_norm();
            assert!(err <= 1e-12, "reconstruction error {err}");
            let orth = (eig.vectors.transpose() * &eig.vectors - DMatrix::identity(5, 5)).norm();
            assert!(orth <= 1e-12, "orthogonality error {orth}");
            assert!(eig.values.as_slice().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn eigen_rejects_nan() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        let s = SymMatrix::from_upper(m).unwrap();
        assert!(matches!(sym_eigen(&s), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn sqrt_small_cases() {
        assert_eq!(
            sym_sqrt(&SymMatrix::identity(4)).unwrap(),
            SymMatrix::identity(4)
        );
        let r = sym_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert_abs_diff_eq!(
            r.as_matrix(),
            &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn sqrt_clamps_round_off_negatives() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-13]);
        let r = sym_sqrt(&m).unwrap();
        assert_eq!(r.get(1, 1), 0.0);
        let bad = SymMatrix::from_diagonal(&[1.0, -1e-6]);
        assert!(matches!(sym_sqrt(&bad), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn sqrt_of_zero_matrix() {
        assert_eq!(sym_sqrt(&SymMatrix::zeros(3)).unwrap(), SymMatrix::zeros(3));
    }

    #[test]
    fn inverse_small_cases() {
        assert_eq!(
            sym_inv(&SymMatrix::identity(3)).unwrap(),
            SymMatrix::identity(3)
        );
        let inv = sym_inv(&SymMatrix::from_diagonal(&[2.0, 4.0])).unwrap();
        assert_abs_diff_eq!(inv.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(inv.get(1, 1), 0.25, epsilon = 1e-15);
        assert_eq!(inv.get(0, 1), 0.0);
    }

    #[test]
    fn inverse_rejects_singular() {
        let m = SymMatrix::from_diagonal(&[1.0, 0.0]);
        assert!(matches!(sym_inv(&m), Err(Error::Singular { .. })));
        let m = SymMatrix::from_diagonal(&[1.0, -2.0]);
        match sym_inv(&m) {
            Err(Error::Singular { min_eigenvalue }) => assert_eq!(min_eigenvalue, -2.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_of_random_spd_multiplies_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_spd(&mut rng, 4);
            let eig = sym_eigen(&m).unwrap();
            let cond = eig.max() / eig.min();
            let inv = sym_inv(&m).unwrap();
            let err = (m.as_matrix() * inv.as_matrix() - DMatrix::identity(4, 4)).norm();
            assert!(err <= 1e-10 * cond, "err {err}, cond {cond}");
        }
    }

    #[test]
    fn norms_of_small_matrices() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(op_norm2(&i3), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(frobenius_norm(&i3), 3f64.sqrt(), epsilon = 1e-15);

        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert_abs_diff_eq!(op_norm2(&d), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(frobenius_norm(&d), 5.0, epsilon = 1e-15);

        // u uᵀ with ‖u‖ = 2 has a single singular value 4.
        let u = DVector::from_column_slice(&[2.0 / 3f64.sqrt(); 3]);
        let r1 = &u * u.transpose();
        assert_abs_diff_eq!(op_norm2(&r1), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frobenius_norm(&r1), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn op_norm_of_rectangular_matrix() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_abs_diff_eq!(op_norm2(&m), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(op_norm2(&m.transpose()), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spd_check_thresholds() {
        let c = spd_check(&SymMatrix::from_diagonal(&[2.0, 1e-3]), 0.0).unwrap();
        assert!(c.is_spd);
        assert_eq!(c.min_eigenvalue, 1e-3);
        let c = spd_check(&SymMatrix::from_diagonal(&[2.0, -1e-12]), 1e-10).unwrap();
        assert!(c.is_spd);
        let c = spd_check(&SymMatrix::from_diagonal(&[2.0, -1e-12]), 0.0).unwrap();
        assert!(!c.is_spd);
    }

    #[test]
    fn from_upper_ignores_lower_triangle() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 99.0, 3.0]);
        let s = SymMatrix::from_upper(m).unwrap();
        assert_eq!(s.get(1, 0), 2.0);
        assert_eq!(s.upper_triangle(), vec![1.0, 2.0, 3.0]);
        assert!(SymMatrix::from_upper(DMatrix::zeros(2, 3)).is_err());
        assert!(SymMatrix::try_from_symmetric(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 3.0]),
            1e-12
        )
        .is_err());
    }

    fn spd_strategy(d: usize) -> impl Strategy<Value = SymMatrix> {
        proptest::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
            let a = DMatrix::from_vec(d, d, v);
            SymMatrix::symmetrize(&(&a * a.transpose() + DMatrix::identity(d, d) * 1e-2)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn sqrt_squares_back(m in (1usize..6).prop_flat_map(spd_strategy)) {
            let r = sym_sqrt(&m).unwrap();
            let norm2 = m.spectral_radius().unwrap();
            let err = (r.as_matrix() * r.as_matrix() - m.as_matrix()).norm();
            prop_assert!(err <= 1e-10 * norm2, "err {}", err);
            prop_assert!(sym_eigen(&r).unwrap().min() >= 0.0);
        }

        #[test]
        fn sqrt_is_operator_monotone(
            (a, p) in (1usize..6).prop_flat_map(|d| (spd_strategy(d), spd_strategy(d)))
        ) {
            let b = a.add(&p);
            let diff = sym_sqrt(&b).unwrap().sub(&sym_sqrt(&a).unwrap());
            prop_assert!(sym_eigen(&diff).unwrap().min() >= -1e-9);
        }

        #[test]
        fn spectral_norm_below_frobenius(v in proptest::collection::vec(-10.0f64..10.0, 12)) {
            let m = DMatrix::from_vec(3, 4, v);
            prop_assert!(op_norm2(&m) <= frobenius_norm(&m) * (1.0 + 1e-14));
        }

        #[test]
        fn double_inverse_round_trips(m in (1usize..6).prop_flat_map(spd_strategy)) {
            let eig = sym_eigen(&m).unwrap();
            prop_assume!(eig.max() / eig.min() <= 1e6);
            let back = sym_inv(&sym_inv(&m).unwrap()).unwrap();
            let err = (back.as_matrix() - m.as_matrix()).norm() / m.frobenius_norm();
            prop_assert!(err <= 1e-8, "err {}", err);
        }
    }
}
