//! Upper bounds on norms and quantiles of random variables.
//!
//! Closed-form bounds on `‖R‖₂` for a standardized draw `R` (mean 0,
//! identity covariance) set the CoinPress clipping radii. When no closed form
//! is available the bounds come from Monte-Carlo order statistics: [`hpub`]
//! carries a Clopper–Pearson correction and a guarantee, [`approx_ub`] does not.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::special::beta_quantile;

/// Produces one standardized draw (mean 0, identity covariance) into the
/// output slice, whose length is the dimension.
pub type StandardizedSampler = Arc<dyn Fn(&mut dyn RngCore, &mut [f64]) -> Result<()> + Send + Sync>;

/// A symmetric location-scale family used to bound norms and quantiles.
#[derive(Clone)]
pub enum TailFamily {
    /// Multivariate standard normal.
    Gaussian,
    /// iid Laplace coordinates with unit variance (scale `1/√2`).
    Laplace,
    /// Any family with finite second moments; only Chebyshev bounds apply.
    ChebyshevGeneric,
    /// A user-supplied standardized sampler.
    Empirical(StandardizedSampler),
}

impl fmt::Debug for TailFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailFamily::Gaussian => f.write_str("Gaussian"),
            TailFamily::Laplace => f.write_str("Laplace"),
            TailFamily::ChebyshevGeneric => f.write_str("ChebyshevGeneric"),
            TailFamily::Empirical(_) => f.write_str("Empirical(..)"),
        }
    }
}

const LAPLACE_UNIT_VARIANCE_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl TailFamily {
    pub fn empirical<F>(sampler: F) -> Self
    where
        F: Fn(&mut dyn RngCore, &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        TailFamily::Empirical(Arc::new(sampler))
    }

    pub fn name(&self) -> &'static str {
        match self {
            TailFamily::Gaussian => "gaussian",
            TailFamily::Laplace => "laplace",
            TailFamily::ChebyshevGeneric => "chebyshev_generic",
            TailFamily::Empirical(_) => "empirical",
        }
    }

    /// Fills `out` with one standardized draw.
    pub fn sample_standardized(&self, rng: &mut dyn RngCore, out: &mut [f64]) -> Result<()> {
        match self {
            TailFamily::Gaussian => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                Ok(())
            }
            TailFamily::Laplace => {
                for v in out.iter_mut() {
                    let a: f64 = Exp1.sample(rng);
                    let b: f64 = Exp1.sample(rng);
                    *v = LAPLACE_UNIT_VARIANCE_SCALE * (a - b);
                }
                Ok(())
            }
            TailFamily::ChebyshevGeneric => Err(Error::invalid(
                "the chebyshev_generic family has no sampler",
            )),
            TailFamily::Empirical(sampler) => sampler(rng, out),
        }
    }

    pub fn has_sampler(&self) -> bool {
        !matches!(self, TailFamily::ChebyshevGeneric)
    }

    /// Closed-form `β`-tail bound on `‖R‖₂` in dimension `d`, when one exists.
    pub fn analytic_norm_quantile(&self, d: usize, beta: f64) -> Option<Result<QuantileBound>> {
        match self {
            TailFamily::Gaussian => Some(gaussian_norm_quantile(d, beta)),
            TailFamily::Laplace => Some(laplace_norm_quantile(d, beta)),
            TailFamily::ChebyshevGeneric => Some(chebyshev_norm_quantile(d, beta)),
            TailFamily::Empirical(_) => None,
        }
    }
}

/// `value` such that `Pr(‖R‖₂ > value) ≤ failure_prob` under the family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileBound {
    pub value: f64,
    pub failure_prob: f64,
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::invalid("dimension must be at least 1"))
    } else {
        Ok(())
    }
}

/// Chebyshev bound `√(d/β)`, valid for any standardized `R`.
pub fn chebyshev_norm_quantile(d: usize, beta: f64) -> Result<QuantileBound> {
    check_dim(d)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    Ok(QuantileBound {
        value: (d as f64 / beta).sqrt(),
        failure_prob: beta,
    })
}

/// Laurent–Massart bound for a standard normal vector:
/// `√(d + √(d·ln(1/β)) + 2·ln(1/β))`.
pub fn gaussian_norm_quantile(d: usize, beta: f64) -> Result<QuantileBound> {
    check_dim(d)?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 1], got {beta}")));
    }
    let d = d as f64;
    let l = (1.0 / beta).ln();
    Ok(QuantileBound {
        value: (d + (d * l).sqrt() + 2.0 * l).sqrt(),
        failure_prob: beta,
    })
}

/// Sub-Weibull bound for iid unit-variance Laplace coordinates:
/// `√(e·d·ln²β)`.
pub fn laplace_norm_quantile(d: usize, beta: f64) -> Result<QuantileBound> {
    check_dim(d)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    let l = beta.ln();
    Ok(QuantileBound {
        value: (std::f64::consts::E * d as f64 * l * l).sqrt(),
        failure_prob: beta,
    })
}

/// Level-`alpha` Clopper–Pearson lower confidence bound on a binomial success
/// probability after `c` successes in `n` trials: the `alpha` quantile of
/// Beta(c, n − c + 1). Zero when `c = 0`.
pub fn clopper_pearson_lower(c: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("clopper-pearson needs n >= 1"));
    }
    if c > n {
        return Err(Error::invalid(format!("success count {c} exceeds trials {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if c == 0 {
        return Ok(0.0);
    }
    beta_quantile(c as f64, (n - c + 1) as f64, alpha)
}

/// Sample-size and search settings for [`hpub`] and [`approx_ub`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpubConfig {
    /// Initial number of simulations.
    pub n: usize,
    /// Grid precision for the failure-probability split.
    pub tau: f64,
    /// Hard cap on the number of simulations.
    pub max_n: usize,
}

impl Default for HpubConfig {
    fn default() -> Self {
        HpubConfig {
            n: 100_000,
            tau: 0.05,
            max_n: 10_000_000,
        }
    }
}

fn min_draws(alpha: f64) -> usize {
    (1.0 / alpha).ceil() as usize
}

/// 1-indexed order-statistic rank `⌈n·q⌉`, clamped to `[1, n]`.
fn rank(n: usize, q: f64) -> usize {
    ((n as f64 * q).ceil() as usize).clamp(1, n)
}

fn kth_smallest(mut xs: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = xs.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn draw<R, F>(sampler: &mut F, n: usize, rng: &mut R) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<f64>,
{
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sampler(rng)?;
        if x.is_nan() {
            return Err(Error::invalid("sampler produced NaN"));
        }
        xs.push(x);
    }
    Ok(xs)
}

/// Settles the split of `alpha` into an order-statistic level `α₁` and a
/// Clopper–Pearson level `α₂ = (α − α₁)/2`. Returns `(n, α₁)` for the
/// smallest admissible `n` reachable from the starting size.
pub fn hpub_plan(alpha: f64, cfg: &HpubConfig) -> Result<(usize, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(cfg.tau > 0.0 && cfg.tau < 0.5) {
        return Err(Error::invalid(format!(
            "precision tau must lie in (0, 0.5) so the search grid is non-empty, got {}",
            cfg.tau
        )));
    }
    let grid = (1.0 / cfg.tau).ceil() as usize - 1;
    let mut n = cfg.n.max(min_draws(alpha));
    loop {
        let mut best = 0.0_f64;
        for j in 1..grid {
            let alpha1 = j as f64 / grid as f64 * alpha;
            let alpha2 = (alpha - alpha1) / 2.0;
            let c = rank(n, 1.0 - alpha1) as u64;
            let lower = clopper_pearson_lower(c, n as u64, alpha2)?;
            if lower >= 1.0 - alpha + alpha2 {
                best = best.max(alpha1);
            }
        }
        if best > 0.0 {
            return Ok((n, best));
        }
        n += 1000;
        if n > cfg.max_n {
            return Err(Error::ResourceExhausted(format!(
                "hpub at alpha = {alpha} needs more than {} simulations",
                cfg.max_n
            )));
        }
    }
}

/// High-probability upper bound: returns `u` with `Pr(X ≤ u) ≥ 1 − alpha`
/// jointly over `X` and the simulations used to build `u`.
pub fn hpub<R, F>(mut sampler: F, alpha: f64, cfg: &HpubConfig, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<f64>,
{
    let (n, alpha1) = hpub_plan(alpha, cfg)?;
    let xs = draw(&mut sampler, n, rng)?;
    Ok(kth_smallest(xs, rank(n, 1.0 - alpha1)))
}

/// The `⌈n(1 − alpha)⌉`-th order statistic of `n` draws, with `n` raised to
/// at least `⌈1/alpha⌉`. No coverage guarantee.
pub fn approx_ub<R, F>(mut sampler: F, alpha: f64, n: usize, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<f64>,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = n.max(min_draws(alpha));
    if n > 100_000_000 {
        return Err(Error::ResourceExhausted(format!(
            "approx_ub at alpha = {alpha} needs {n} draws"
        )));
    }
    let xs = draw(&mut sampler, n, rng)?;
    Ok(kth_smallest(xs, rank(n, 1.0 - alpha)))
}

/// How the clipping radii γ₁, γ₂ are computed for families with closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaMode {
    /// Closed-form tail bounds where available.
    #[default]
    Analytic,
    /// Monte-Carlo order statistics via [`approx_ub`] (no guarantee).
    Approximate,
}

/// A radius bound together with whether it carries a proven guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusBound {
    pub value: f64,
    pub guaranteed: bool,
}

/// `β`-tail bound on `‖R‖₂` for a standardized draw in dimension `d`.
///
/// Closed forms are used in analytic mode; the empirical family (and
/// approximate mode for any family with a sampler) falls back to
/// [`approx_ub`] over `approx_draws` simulated norms and is flagged as not
/// guaranteed.
pub fn norm_bound<R: Rng + ?Sized>(
    family: &TailFamily,
    d: usize,
    beta: f64,
    mode: GammaMode,
    approx_draws: usize,
    rng: &mut R,
) -> Result<RadiusBound> {
    let analytic = match mode {
        GammaMode::Analytic => family.analytic_norm_quantile(d, beta),
        GammaMode::Approximate if !family.has_sampler() => family.analytic_norm_quantile(d, beta),
        GammaMode::Approximate => None,
    };
    if let Some(bound) = analytic {
        return Ok(RadiusBound {
            value: bound?.value,
            guaranteed: true,
        });
    }
    check_dim(d)?;
    let mut buf = vec![0.0; d];
    let mut rng_core = RngAdapter(rng);
    let value = approx_ub(
        |r: &mut RngAdapter<'_, R>| {
            family.sample_standardized(r, &mut buf)?;
            Ok(buf.iter().map(|v| v * v).sum::<f64>().sqrt())
        },
        beta,
        approx_draws,
        &mut rng_core,
    )?;
    Ok(RadiusBound {
        value,
        guaranteed: false,
    })
}

/// Lets a generic `Rng + ?Sized` be used as `&mut dyn RngCore`.
pub(crate) struct RngAdapter<'a, R: ?Sized>(pub(crate) &'a mut R);

impl<R: Rng + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
