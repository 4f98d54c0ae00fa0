//! Generalized CoinPress: private mean estimation by repeatedly shrinking a
//! ball known to contain the mean.
//!
//! [`mvm_step`] is one improvement of the ball on already-standardized
//! points. [`mvm_rec`] standardizes by a covariance upper bound, runs `t`
//! steps, and reports every step's center with its exact noise variance in
//! the original coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::privacy::{self, compose_budgets, Noise, PrivacyBudget};
use crate::tail_bounds::{norm_bound, GammaMode, TailFamily};

/// A ball assumed to contain the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBall {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl MeanBall {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid(format!("ball radius must be positive, got {radius}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ball center has non-finite entries"));
        }
        Ok(MeanBall { center, radius })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

/// A symmetric PSD upper bound (in Löwner order) on a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovUpperBound(DMatrix<f64>);

impl CovUpperBound {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        linalg::check_symmetric(&m, "covariance bound")?;
        let m = linalg::symmetrize(&m);
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if linalg::min_eigenvalue(&m) < -linalg::SYMMETRY_TOL_REL * scale {
            return Err(Error::invalid("covariance bound has a negative eigenvalue"));
        }
        Ok(CovUpperBound(m))
    }

    pub fn identity(d: usize) -> Self {
        CovUpperBound(DMatrix::identity(d, d))
    }

    pub fn diagonal(diag: &DVector<f64>) -> Result<Self> {
        CovUpperBound::new(DMatrix::from_diagonal(diag))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Where the standardizing shift comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Shift by the public initial ball center.
    #[default]
    BallCenter,
    /// Shift by the mean of the input points. The shift is data-dependent
    /// and is added back unprivatized, so outputs are not private.
    DataMean,
}

/// Knobs for [`mvm_rec`] beyond the mathematical inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvmOptions {
    pub noise: Noise,
    pub gamma_mode: GammaMode,
    /// Simulated norms per radius when γ is estimated by Monte-Carlo.
    pub approx_draws: usize,
    pub centering: Centering,
}

impl Default for MvmOptions {
    fn default() -> Self {
        MvmOptions {
            noise: Noise::Gaussian,
            gamma_mode: GammaMode::Analytic,
            approx_draws: 100_000,
            centering: Centering::BallCenter,
        }
    }
}

/// Clipping radii for one step: `γ₁` bounds every point's deviation, `γ₂`
/// the deviation of the noised mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRadii {
    pub gamma1: f64,
    pub gamma2: f64,
    pub guaranteed: bool,
}

/// Computes the radii for a step with failure share `beta_s` over `k` points.
pub fn step_radii<R: Rng + ?Sized>(
    family: &TailFamily,
    d: usize,
    k: usize,
    beta_s: f64,
    opts: &MvmOptions,
    rng: &mut R,
) -> Result<StepRadii> {
    if k == 0 {
        return Err(Error::invalid("need at least one point"));
    }
    let g1 = norm_bound(family, d, beta_s / k as f64, opts.gamma_mode, opts.approx_draws, rng)?;
    let g2 = norm_bound(family, d, beta_s, opts.gamma_mode, opts.approx_draws, rng)?;
    Ok(StepRadii {
        gamma1: g1.value,
        gamma2: g2.value,
        guaranteed: g1.guaranteed && g2.guaranteed,
    })
}

/// Nearest point of the closed ball.
pub fn project_to_ball(point: &DVector<f64>, ball: &MeanBall) -> DVector<f64> {
    let diff = point - &ball.center;
    let norm = diff.norm();
    if norm <= ball.radius {
        point.clone()
    } else {
        &ball.center + diff * (ball.radius / norm)
    }
}

/// Output of one improvement step.
#[derive(Debug, Clone, PartialEq)]
pub struct MvmStep {
    pub ball: MeanBall,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    /// Points that fell outside the inflated ball and were projected.
    pub clipped: usize,
}

/// `r′ = γ₂·√(1/k + 2(r+γ₁)²/(k²ρ))`.
pub fn next_radius(gamma2: f64, inflated: f64, k: usize, rho: f64) -> f64 {
    let k = k as f64;
    gamma2 * (1.0 / k + 2.0 * inflated * inflated / (k * k * rho)).sqrt()
}

fn check_points(points: &DMatrix<f64>, d: usize) -> Result<()> {
    if points.nrows() == 0 {
        return Err(Error::invalid("no points"));
    }
    if points.ncols() != d {
        return Err(Error::invalid(format!(
            "points have {} columns, ball has dimension {d}",
            points.ncols()
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points have non-finite entries"));
    }
    Ok(())
}

/// One step with precomputed radii.
pub fn mvm_step_with<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    ball: &MeanBall,
    radii: &StepRadii,
    rho_s: PrivacyBudget,
    noise: Noise,
    rng: &mut R,
) -> Result<MvmStep> {
    check_points(points, ball.dim())?;
    if rho_s.rho() <= 0.0 {
        return Err(Error::invalid("step budget must be positive"));
    }
    let k = points.nrows();
    let inflated = MeanBall {
        center: ball.center.clone(),
        radius: ball.radius + radii.gamma1,
    };
    let mut sum = DVector::zeros(ball.dim());
    let mut clipped = 0;
    for row in points.row_iter() {
        let p = row.transpose();
        let q = project_to_ball(&p, &inflated);
        if q != p {
            clipped += 1;
        }
        sum += q;
    }
    let mean = sum / k as f64;
    let sens = privacy::mean_l2_sensitivity(inflated.radius, k)?;
    let noised = privacy::gaussian_mechanism(&mean, sens, rho_s, noise, rng)?;
    let radius = next_radius(radii.gamma2, inflated.radius, k, rho_s.rho());
    Ok(MvmStep {
        ball: MeanBall::new(noised.value, radius)?,
        sigma: noised.noise_sigma,
        clipped,
    })
}

/// One private improvement of `ball` from `k` standardized points, with
/// `γ₁` at `β_s/k` and `γ₂` at `β_s`.
pub fn mvm_step<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    ball: &MeanBall,
    family: &TailFamily,
    rho_s: PrivacyBudget,
    beta_s: f64,
    opts: &MvmOptions,
    rng: &mut R,
) -> Result<MvmStep> {
    check_points(points, ball.dim())?;
    let radii = step_radii(family, ball.dim(), points.nrows(), beta_s, opts, rng)?;
    mvm_step_with(points, ball, &radii, rho_s, opts.noise, rng)
}

/// One of the `t` estimates returned by [`mvm_rec`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate {
    /// Noised mean in original coordinates.
    pub center: DVector<f64>,
    /// Per-coordinate variance of the privatizing noise in original coordinates.
    pub noise_variances: DVector<f64>,
    pub budget: PrivacyBudget,
    /// Standardized noise standard deviation.
    pub sigma: f64,
    /// Ball radius after the step, in standardized units.
    pub radius: f64,
    pub clipped: usize,
    /// False when a radius came from an unguaranteed Monte-Carlo estimate.
    pub guaranteed: bool,
}

/// Per-step budgets: `t−1` steps at `ρ/(2(t−1))` then the remainder (`≈ ρ/2`),
/// or all of `ρ` when `t = 1`. The budgets compose to `ρ` exactly.
pub fn step_budgets(rho: PrivacyBudget, t: usize) -> Result<Vec<PrivacyBudget>> {
    if t == 0 {
        return Err(Error::invalid("t must be at least 1"));
    }
    if rho.rho() <= 0.0 {
        return Err(Error::ZeroBudget);
    }
    if t == 1 {
        return Ok(vec![rho]);
    }
    let early = PrivacyBudget::new(rho.rho() / (2 * (t - 1)) as f64)?;
    let mut out = vec![early; t - 1];
    let spent = compose_budgets(&out);
    out.push(PrivacyBudget::new(exact_remainder(rho.rho(), spent.rho()))?);
    debug_assert_eq!(compose_budgets(&out), rho);
    Ok(out)
}

/// A value `x` with `spent + x == total` in floating point, when one exists
/// near `total − spent`.
fn exact_remainder(total: f64, spent: f64) -> f64 {
    let mut x = total - spent;
    for _ in 0..8 {
        let s = spent + x;
        if s == total {
            break;
        }
        let bits = x.to_bits();
        x = if s < total { f64::from_bits(bits + 1) } else { f64::from_bits(bits - 1) };
    }
    x
}

/// Standardization `y = S⁻¹(x − shift)` and its inverse.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl Standardizer {
    pub fn new(cov_bound: &CovUpperBound, shift: DVector<f64>) -> Result<Self> {
        let (sqrt, inv_sqrt) = linalg::sqrt_and_inverse_sqrt(cov_bound.matrix())?;
        Ok(Standardizer {
            sqrt,
            inv_sqrt,
            shift,
        })
    }

    /// Rows of `points` mapped to standardized coordinates.
    pub fn forward_rows(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = points.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.shift.transpose();
        }
        // rows are xᵀ, so (S⁻¹x)ᵀ = xᵀS⁻¹ for symmetric S⁻¹
        centered * &self.inv_sqrt
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.inv_sqrt * (x - &self.shift)
    }

    pub fn backward(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.sqrt * y + &self.shift
    }

    /// Per-coordinate variance in original units of isotropic noise with
    /// standard deviation `sigma` in standardized units: `σ²·diag(SSᵀ)`.
    pub fn noise_variances(&self, sigma: f64) -> DVector<f64> {
        let sst = &self.sqrt * self.sqrt.transpose();
        sst.diagonal() * (sigma * sigma)
    }

    /// Factor applied to the initial radius: the largest diagonal entry of `S⁻¹`.
    pub fn radius_scale(&self) -> f64 {
        self.inv_sqrt.diagonal().max()
    }
}

/// Runs `t` CoinPress steps with total budget `rho` and failure probability
/// `beta` split evenly across steps.
#[allow(clippy::too_many_arguments)]
pub fn mvm_rec<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    ball0: &MeanBall,
    cov_bound: &CovUpperBound,
    family: &TailFamily,
    t: usize,
    rho: PrivacyBudget,
    beta: f64,
    opts: &MvmOptions,
    rng: &mut R,
) -> Result<Vec<StepEstimate>> {
    let d = ball0.dim();
    check_points(points, d)?;
    if cov_bound.dim() != d {
        return Err(Error::invalid(format!(
            "covariance bound is {0}x{0}, points have dimension {d}",
            cov_bound.dim()
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    let budgets = step_budgets(rho, t)?;
    let k = points.nrows();

    let shift = match opts.centering {
        Centering::BallCenter => ball0.center.clone(),
        Centering::DataMean => points.row_mean().transpose(),
    };
    let std = Standardizer::new(cov_bound, shift)?;
    let y = std.forward_rows(points);
    let mut ball = MeanBall::new(std.forward(&ball0.center), ball0.radius * std.radius_scale())?;

    let beta_m = beta / t as f64;
    let radii = step_radii(family, d, k, beta_m / 2.0, opts, rng)?;

    let mut out = Vec::with_capacity(t);
    for budget in budgets {
        let step = mvm_step_with(&y, &ball, &radii, budget, opts.noise, rng)?;
        out.push(StepEstimate {
            center: std.backward(&step.ball.center),
            noise_variances: std.noise_variances(step.sigma),
            budget,
            sigma: step.sigma,
            radius: step.ball.radius,
            clipped: step.clipped,
            guaranteed: radii.guaranteed,
        });
        ball = step.ball;
    }
    Ok(out)
}
