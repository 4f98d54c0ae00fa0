//! zCDP budget arithmetic, ℓ₂ sensitivity of a clipped mean, and the
//! Gaussian mechanism. This is the only place privatizing noise is drawn.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A zero-concentrated DP budget `ρ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct PrivacyBudget(f64);

impl PrivacyBudget {
    pub const ZERO: PrivacyBudget = PrivacyBudget(0.0);

    pub fn new(rho: f64) -> Result<Self> {
        if rho.is_finite() && rho >= 0.0 {
            Ok(PrivacyBudget(rho))
        } else {
            Err(Error::InvalidBudget(rho))
        }
    }

    pub fn rho(self) -> f64 {
        self.0
    }

    /// Sequential composition of two mechanisms.
    pub fn compose(self, other: PrivacyBudget) -> PrivacyBudget {
        PrivacyBudget(self.0 + other.0)
    }

    /// Splits off `1/parts` of the budget.
    pub fn fraction(self, parts: usize) -> PrivacyBudget {
        PrivacyBudget(self.0 / parts as f64)
    }
}

/// Sums a sequence of budgets left to right. The empty composition is zero.
pub fn compose_budgets(parts: &[PrivacyBudget]) -> PrivacyBudget {
    parts.iter().fold(PrivacyBudget::ZERO, |acc, &p| acc.compose(p))
}

/// Validates raw ρ values and composes them.
pub fn compose_raw(parts: &[f64]) -> Result<PrivacyBudget> {
    let parts = parts
        .iter()
        .map(|&r| PrivacyBudget::new(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(compose_budgets(&parts))
}

/// ℓ₂ sensitivity of the mean of `k` points confined to a ball of the given
/// radius: replacing one point moves the mean by at most `2·radius/k`.
pub fn mean_l2_sensitivity(radius: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("mean sensitivity needs k >= 1"));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid(format!(
            "clipping radius must be positive and finite, got {radius}"
        )));
    }
    Ok(2.0 * radius / k as f64)
}

/// Standard deviation of the Gaussian mechanism for a given sensitivity and budget.
pub fn gaussian_sigma(sensitivity: f64, budget: PrivacyBudget) -> Result<f64> {
    if !(sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(Error::invalid(format!(
            "sensitivity must be positive and finite, got {sensitivity}"
        )));
    }
    if budget.rho() == 0.0 {
        return Err(Error::ZeroBudget);
    }
    Ok(sensitivity / (2.0 * budget.rho()).sqrt())
}

/// Whether the mechanism actually draws noise.
///
/// `Disabled` exists for tests that need the exact pre-noise statistic; any
/// output produced with it is not private.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Noise {
    #[default]
    Gaussian,
    Disabled,
}

/// A privatized vector with the standard deviation of the noise added to
/// each coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedVector {
    pub value: DVector<f64>,
    pub noise_sigma: f64,
}

/// Adds iid `N(0, σ²)` noise to every coordinate, `σ = Δ/√(2ρ)`.
pub fn gaussian_mechanism<R: Rng + ?Sized>(
    value: &DVector<f64>,
    sensitivity: f64,
    budget: PrivacyBudget,
    noise: Noise,
    rng: &mut R,
) -> Result<NoisedVector> {
    let sigma = gaussian_sigma(sensitivity, budget)?;
    let value = match noise {
        Noise::Gaussian => value.map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        }),
        Noise::Disabled => value.clone(),
    };
    Ok(NoisedVector {
        value,
        noise_sigma: sigma,
    })
}
