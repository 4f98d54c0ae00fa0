//! Adaptive sufficient statistic perturbation for linear regression, with
//! the three releases each taking a third of a zCDP budget.
//!
//! Neighbouring datasets differ by replacing one row, so the sensitivities
//! are `‖X‖²` for the minimum eigenvalue, `√2‖X‖²` for `XᵀX` (Frobenius) and
//! `2‖X‖‖Y‖` for `Xᵀy`.

use gvdp_core::linalg;
use gvdp_core::privacy::{gaussian_sigma, Noise, PrivacyBudget};
use gvdp_core::special::normal_quantile;
use gvdp_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Failure probability of the eigenvalue lower bound and of the noise-norm
/// bound used to pick the ridge.
pub const ADASSP_FAILURE: f64 = 0.05;

/// Rows scaled into the `x_bound` ball and responses clamped to `±y_bound`.
pub fn clamp_data(x: &DMatrix<f64>, y: &DVector<f64>, x_bound: f64, y_bound: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut x = x.clone();
    for mut row in x.row_iter_mut() {
        let norm = row.norm();
        if norm > x_bound {
            row *= x_bound / norm;
        }
    }
    (x, y.map(|v| v.clamp(-y_bound, y_bound)))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Private ridge regression of `y` on `X` under `rho`-zCDP.
///
/// With `Noise::Disabled` every noise scale is taken as zero (the `ρ → ∞`
/// limit), which makes the output ordinary least squares on the clamped data.
pub fn adassp<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    x_bound: f64,
    y_bound: f64,
    rho: PrivacyBudget,
    noise: Noise,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(x_bound > 0.0 && y_bound > 0.0 && x_bound.is_finite() && y_bound.is_finite()) {
        return Err(Error::InvalidArgument("data bounds must be positive and finite".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::InvalidArgument("X and y have different row counts".into()));
    }
    let d = x.ncols();
    let (x, y) = clamp_data(x, y, x_bound, y_bound);
    let gram = linalg::symmetrize(&(x.transpose() * &x));
    let xty = x.transpose() * &y;

    let third = rho.fraction(3);
    let scale = |sens: f64| -> Result<f64> {
        match noise {
            Noise::Gaussian => gaussian_sigma(sens, third),
            Noise::Disabled => Ok(0.0),
        }
    };
    let xx = x_bound * x_bound;
    let s_lambda = scale(xx)?;
    let s_gram = scale(std::f64::consts::SQRT_2 * xx)?;
    let s_xty = scale(2.0 * x_bound * y_bound)?;

    let shift = normal_quantile(1.0 - ADASSP_FAILURE)?;
    let lambda_min = (linalg::min_eigenvalue(&gram) + s_lambda * gaussian(rng) - s_lambda * shift).max(0.0);
    let noise_norm = s_gram * (d as f64 * (2.0 * (d * d) as f64 / ADASSP_FAILURE).ln()).sqrt();
    let ridge = (noise_norm - lambda_min).max(0.0);

    let mut noisy_gram = gram;
    for i in 0..d {
        for j in i..d {
            let e = s_gram * gaussian(rng);
            noisy_gram[(i, j)] += e;
            if i != j {
                noisy_gram[(j, i)] += e;
            }
        }
    }
    let noisy_xty = xty + DVector::from_fn(d, |_, _| s_xty * gaussian(rng));
    let system = noisy_gram + DMatrix::identity(d, d) * ridge;
    system
        .lu()
        .solve(&noisy_xty)
        .filter(|b| b.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::SingularFit("regularized AdaSSP system is singular".into()))
}
