//! Small dense symmetric-matrix helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor used before square roots and inversions.
pub const EIGEN_FLOOR_REL: f64 = 1e-12;

/// Relative tolerance for treating a matrix as symmetric.
pub const SYMMETRY_TOL_REL: f64 = 1e-8;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `M − Mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn check_square_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Rejects matrices whose asymmetry exceeds [`SYMMETRY_TOL_REL`] relative to
/// their largest entry.
pub fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    check_square_finite(m, what)?;
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if asymmetry(m) > SYMMETRY_TOL_REL * scale {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Eigendecomposition of the symmetrized matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.max()
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.amax()
}

/// Rebuilds `Q diag(f(λ)) Qᵀ` from an eigendecomposition.
pub fn eigen_map(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let m = q * DMatrix::from_diagonal(&mapped) * q.transpose();
    symmetrize(&m)
}

/// Symmetric PSD square root `S` and its inverse, with eigenvalues floored
/// at `EIGEN_FLOOR_REL · λ_max` first.
///
/// Fails if the matrix has no positive eigenvalue at all.
pub fn sqrt_and_inverse_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_square_finite(m, "covariance bound")?;
    let eig = sym_eigen(m);
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return Err(Error::invalid(
            "covariance bound is singular (no positive eigenvalue)",
        ));
    }
    let floor = EIGEN_FLOOR_REL * max;
    let sqrt = eigen_map(&eig, |l| l.max(floor).sqrt());
    let inv_sqrt = eigen_map(&eig, |l| 1.0 / l.max(floor).sqrt());
    Ok((sqrt, inv_sqrt))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    check_square_finite(m, what)?;
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::invalid(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&chol.inverse()))
}
