//! Synthetic data generators and censoring.

use gvdp_core::blb::Dataset;
use gvdp_core::{Error, Result};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

/// Standard deviation of the perturbation added to the near-duplicate last covariate.
pub const COLLINEAR_NOISE_SD: f64 = 0.01;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian covariates: the first `d−1` columns are iid `N(0, 1)` and the
/// last is their mean plus `N(0, 0.01²)`, so the design has rank ≈ `d−1`.
/// For `d = 1` the single column is `N(0, 1)`.
fn covariates<R: Rng + ?Sized>(d: usize, rng: &mut R, row: &mut Vec<f64>) {
    row.clear();
    if d == 1 {
        row.push(normal(rng));
        return;
    }
    let mut sum = 0.0;
    for _ in 0..d - 1 {
        let x = normal(rng);
        sum += x;
        row.push(x);
    }
    row.push(sum / (d - 1) as f64 + COLLINEAR_NOISE_SD * normal(rng));
}

fn check_shape(n: usize, d: usize, beta: &[f64]) -> Result<()> {
    if d == 0 || n <= d {
        return Err(Error::InvalidArgument(format!("need n > d ≥ 1, got n = {n}, d = {d}")));
    }
    if beta.len() != d {
        return Err(Error::InvalidArgument(format!("{} coefficients for d = {d}", beta.len())));
    }
    Ok(())
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect()
}

/// `y = Xβ + ε`, `ε ~ N(0, noise_sd²)`. Columns `x0 … x{d−1}, y`; `y` is the response.
pub fn generate_linear<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    beta: &[f64],
    noise_sd: f64,
    rng: &mut R,
) -> Result<Dataset> {
    check_shape(n, d, beta)?;
    let mut values = Vec::with_capacity(n * (d + 1));
    let mut row = Vec::with_capacity(d);
    for _ in 0..n {
        covariates(d, rng, &mut row);
        let y = row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>() + noise_sd * normal(rng);
        values.extend_from_slice(&row);
        values.push(y);
    }
    Dataset::new(values, d + 1, Some(d))?.with_names(names(d))
}

/// Binary outcome with `Pr(y = 1) = min(1, 0.05·p_i/p̄)`, where
/// `p_i = 1/(1 + exp(−x_iβ))` and `p̄` is their mean. Covariates as in
/// [`generate_linear`].
pub fn generate_logistic_imbalanced<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    beta: &[f64],
    rng: &mut R,
) -> Result<Dataset> {
    check_shape(n, d, beta)?;
    let mut xs = Vec::with_capacity(n * d);
    let mut ps = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(d);
    for _ in 0..n {
        covariates(d, rng, &mut row);
        let z: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        ps.push(1.0 / (1.0 + (-z).exp()));
        xs.extend_from_slice(&row);
    }
    let p_bar = ps.iter().sum::<f64>() / n as f64;
    let mut values = Vec::with_capacity(n * (d + 1));
    for (x, p) in xs.chunks_exact(d).zip(&ps) {
        let q = (p / p_bar * 0.05).min(1.0);
        assert!((0.0..=1.0).contains(&q));
        let y = Bernoulli::new(q).expect("probability in [0, 1]").sample(rng);
        values.extend_from_slice(x);
        values.push(f64::from(u8::from(y)));
    }
    Dataset::new(values, d + 1, Some(d))?.with_names(names(d))
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Replaces values above the `(100 − top_percent)`-th percentile by that percentile.
pub fn clip_quantile(values: &[f64], top_percent: f64) -> Result<Vec<f64>> {
    if !(0.0..100.0).contains(&top_percent) {
        return Err(Error::InvalidArgument(format!(
            "top_percent must lie in [0, 100), got {top_percent}"
        )));
    }
    if top_percent == 0.0 || values.is_empty() {
        return Ok(values.to_vec());
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cap = percentile_sorted(&sorted, 100.0 - top_percent);
    Ok(values.iter().map(|&v| v.min(cap)).collect())
}
