//! Combining the per-step CoinPress estimates into one private mean or
//! covariance, and inflating covariance estimates into upper bounds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blb::Estimator;
use crate::coinpress::{CovUpperBound, StepEstimate};
use crate::error::{Error, Result};
use crate::linalg;
use crate::special::normal_quantile;
use crate::tail_bounds::{hpub, HpubConfig};

/// Inverse-variance weighting per coordinate. Returns the combined estimate
/// and its variance `1/Σ(1/σ²ₘ)`.
pub fn precision_weight_diag(
    estimates: &[DVector<f64>],
    variances: &[DVector<f64>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    if estimates.is_empty() {
        return Err(Error::invalid("no estimates to combine"));
    }
    if estimates.len() != variances.len() {
        return Err(Error::invalid("estimate and variance counts differ"));
    }
    let d = estimates[0].len();
    if estimates.iter().chain(variances).any(|v| v.len() != d) {
        return Err(Error::invalid("estimates have differing dimensions"));
    }
    if variances.iter().flat_map(|v| v.iter()).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("precision weighting needs positive finite variances"));
    }
    let mut num = DVector::zeros(d);
    let mut den = DVector::zeros(d);
    for (e, v) in estimates.iter().zip(variances) {
        for j in 0..d {
            num[j] += e[j] / v[j];
            den[j] += 1.0 / v[j];
        }
    }
    let combined = num.component_div(&den);
    let var = den.map(|p| 1.0 / p);
    Ok((combined, var))
}

/// Minimum-variance unbiased linear combination for full covariances:
/// `(ΣSₘ⁻¹)⁻¹ ΣSₘ⁻¹τₘ`, with covariance `(ΣSₘ⁻¹)⁻¹`.
pub fn precision_weight_matrix(
    estimates: &[DVector<f64>],
    covariances: &[DMatrix<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if estimates.is_empty() || estimates.len() != covariances.len() {
        return Err(Error::invalid("need matching, non-empty estimates and covariances"));
    }
    let d = estimates[0].len();
    let mut precision = DMatrix::zeros(d, d);
    let mut weighted = DVector::zeros(d);
    for (e, s) in estimates.iter().zip(covariances) {
        if e.len() != d || s.nrows() != d {
            return Err(Error::invalid("estimates have differing dimensions"));
        }
        let inv = linalg::spd_inverse(s, "estimate covariance")?;
        weighted += &inv * e;
        precision += inv;
    }
    let cov = linalg::spd_inverse(&precision, "combined precision")?;
    Ok((&cov * weighted, cov))
}

/// Upper triangle, row by row.
pub fn flatten_upper(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    linalg::check_square_finite(m, "matrix")?;
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push(m[(i, j)]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Dimension `d` with `d(d+1)/2 = len`, if any.
pub fn triangle_dim(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d..=d + 1).find(|&d| d * (d + 1) / 2 == len)
}

/// Inverse of [`flatten_upper`]: mirrors the upper triangle.
pub fn unflatten(entries: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = triangle_dim(entries.len()).ok_or_else(|| {
        Error::invalid(format!("{} is not a triangular number", entries.len()))
    })?;
    let mut m = DMatrix::zeros(d, d);
    let mut it = entries.iter();
    for i in 0..d {
        for j in i..d {
            let v = *it.next().expect("length checked");
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Whether a covariance estimate keeps off-diagonal structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovMode {
    #[default]
    Diagonal,
    Full,
}

/// A private covariance upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateCovEstimate {
    pub matrix: DMatrix<f64>,
    /// Per-coordinate inflation added to the diagonal; constant in full mode.
    pub inflation_gamma: DVector<f64>,
    pub mode: CovMode,
}

fn combine_steps(steps: &[StepEstimate]) -> Result<(DVector<f64>, DVector<f64>)> {
    let centers: Vec<_> = steps.iter().map(|s| s.center.clone()).collect();
    let vars: Vec<_> = steps.iter().map(|s| s.noise_variances.clone()).collect();
    precision_weight_diag(&centers, &vars)
}

/// Diagonal covariance bound from step estimates of the per-subset variance
/// vectors: the precision-weighted variances plus `Φ⁻¹(1 − β_ub/d)` combined
/// noise standard deviations.
pub fn estimate_diag_cov(steps: &[StepEstimate], beta_ub: f64) -> Result<PrivateCovEstimate> {
    let (v, var) = combine_steps(steps)?;
    let d = v.len();
    if !(beta_ub > 0.0 && beta_ub / (d as f64) < 1.0) {
        return Err(Error::invalid(format!("beta_ub must lie in (0, d), got {beta_ub}")));
    }
    let z = normal_quantile(1.0 - beta_ub / d as f64)?;
    let gamma = var.map(|s2| z * s2.sqrt());
    Ok(PrivateCovEstimate {
        matrix: DMatrix::from_diagonal(&(v + &gamma)),
        inflation_gamma: gamma,
        mode: CovMode::Diagonal,
    })
}

/// Spectral norm of a symmetric matrix whose upper-triangle entries are
/// independent `N(0, v)` with the given flattened variances.
pub fn sample_noise_spectral_norm<R: Rng + ?Sized>(variances: &DVector<f64>, rng: &mut R) -> Result<f64> {
    let sd = variances.map(f64::sqrt);
    let flat = sd.map(|s| {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    });
    Ok(linalg::sym_spectral_norm(&unflatten(&flat)?))
}

/// Full covariance bound from step estimates of the flattened per-subset
/// covariances: the unflattened precision-weighted estimate plus `γI`, where
/// `γ` upper-bounds the spectral norm of the combined noise matrix with
/// probability `1 − β_ub`.
pub fn estimate_full_cov<R: Rng + ?Sized>(
    steps: &[StepEstimate],
    beta_ub: f64,
    hpub_cfg: &HpubConfig,
    rng: &mut R,
) -> Result<PrivateCovEstimate> {
    let (s, var) = combine_steps(steps)?;
    let m = unflatten(&s)?;
    let d = m.nrows();
    let gamma = hpub(|r: &mut R| sample_noise_spectral_norm(&var, r), beta_ub, hpub_cfg, rng)?;
    Ok(PrivateCovEstimate {
        matrix: m + DMatrix::identity(d, d) * gamma,
        inflation_gamma: DVector::from_element(d, gamma),
        mode: CovMode::Full,
    })
}

/// Floors the eigenvalues of the symmetrized matrix at `eps`. The result
/// dominates the input in Löwner order.
pub fn psd_projection(m: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    linalg::check_square_finite(m, "matrix")?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be nonnegative, got {eps}")));
    }
    let eig = linalg::sym_eigen(m);
    if eig.eigenvalues.iter().all(|&l| l >= eps) {
        return Ok(linalg::symmetrize(m));
    }
    Ok(linalg::eigen_map(&eig, |l| l.max(eps)))
}

/// Covariance bound for the replicate means: `(r(n/k)/r(n))·Σ̃`, which is
/// `k·Σ̃` for an estimator converging at rate `1/n`.
pub fn scale_cov_for_theta<E: Estimator + ?Sized>(
    sigma_tilde: &PrivateCovEstimate,
    k: usize,
    est: &E,
    n: usize,
) -> Result<CovUpperBound> {
    if k == 0 || n == 0 {
        return Err(Error::invalid("k and n must be positive"));
    }
    let factor = est.convergence_rate(n as f64 / k as f64) / est.convergence_rate(n as f64);
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("convergence rate ratio is {factor}")));
    }
    CovUpperBound::new(&sigma_tilde.matrix * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blb::Dataset;
    use crate::privacy::PrivacyBudget;
    use crate::stream;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn diag_weighting_examples() {
        let (c, var) = precision_weight_diag(&[v(&[1.0]), v(&[3.0])], &[v(&[1.0]), v(&[1.0])]).unwrap();
        assert_eq!((c[0], var[0]), (2.0, 0.5));
        let (c, _) = precision_weight_diag(&[v(&[1.0]), v(&[3.0])], &[v(&[1.0]), v(&[1e12])]).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-11);
        assert!(precision_weight_diag(&[v(&[1.0])], &[v(&[0.0])]).is_err());
        assert!(precision_weight_diag(&[], &[]).is_err());
    }

    #[test]
    fn diag_weighting_minimizes_variance() {
        // brute-force search over the simplex for t = 3
        let vars = [2.0, 0.7, 5.0];
        let ests = [1.0, -2.0, 4.0];
        let (c, var) = precision_weight_diag(
            &ests.iter().map(|&e| v(&[e])).collect::<Vec<_>>(),
            &vars.iter().map(|&s| v(&[s])).collect::<Vec<_>>(),
        )
        .unwrap();
        let steps = 1000;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=steps {
            for j in 0..=steps - i {
                let w = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
                let var_w: f64 = w.iter().zip(&vars).map(|(w, s)| w * w * s).sum();
                if var_w < best.0 {
                    best = (var_w, w.iter().zip(&ests).map(|(w, e)| w * e).sum());
                }
            }
        }
        assert!((var[0] - best.0).abs() < 1e-6, "{} vs {}", var[0], best.0);
        assert!((c[0] - best.1).abs() < 5e-3);
        assert!(var[0] <= vars.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn matrix_weighting_reductions() {
        let ests = [v(&[1.0, 2.0]), v(&[3.0, -2.0]), v(&[0.5, 0.0])];
        let iso: Vec<_> = (0..3).map(|_| DMatrix::identity(2, 2) * 2.0).collect();
        let (c, cov) = precision_weight_matrix(&ests, &iso).unwrap();
        assert!((c - v(&[1.5, 0.0])).amax() < 1e-12);
        assert!((cov - DMatrix::identity(2, 2) * (2.0 / 3.0)).amax() < 1e-12);

        let dvars = [v(&[1.0, 4.0]), v(&[2.0, 0.5]), v(&[3.0, 3.0])];
        let diag: Vec<_> = dvars.iter().map(DMatrix::from_diagonal).collect();
        let (cm, covm) = precision_weight_matrix(&ests, &diag).unwrap();
        let (cd, vd) = precision_weight_diag(&ests, &dvars).unwrap();
        assert!((cm - cd).amax() < 1e-12);
        assert!((covm.diagonal() - vd).amax() < 1e-12);
        let singular = vec![DMatrix::zeros(2, 2); 3];
        assert!(precision_weight_matrix(&ests, &singular).is_err());
    }

    #[test]
    fn flatten_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        let f = flatten_upper(&m).unwrap();
        assert_eq!(f, v(&[1.0, 2.0, 3.0]));
        assert_eq!(unflatten(&f).unwrap(), m);
        assert_eq!(flatten_upper(&DMatrix::identity(3, 3)).unwrap().len(), 6);
        assert_eq!(unflatten(&v(&[7.0])).unwrap(), DMatrix::from_element(1, 1, 7.0));
        assert!(unflatten(&v(&[1.0, 2.0])).is_err());
        for len in [0, 1, 3, 6, 10, 15, 5050] {
            assert!(triangle_dim(len).is_some(), "{len}");
        }
        for len in [2, 4, 5, 7, 11, 5051] {
            assert!(triangle_dim(len).is_none(), "{len}");
        }
    }

    fn step(center: DVector<f64>, var: DVector<f64>) -> StepEstimate {
        StepEstimate {
            center,
            noise_variances: var,
            budget: PrivacyBudget::ZERO,
            sigma: 1.0,
            radius: 1.0,
            clipped: 0,
            guaranteed: true,
        }
    }

    #[test]
    fn diag_cov_gamma() {
        let est = estimate_diag_cov(&[step(v(&[2.0]), v(&[1.0]))], 0.05).unwrap();
        assert!((est.inflation_gamma[0] - 1.644_853_626_951_472_2).abs() < 1e-9);
        assert!((est.matrix[(0, 0)] - 3.644_853_626_951_472).abs() < 1e-9);
        assert!(estimate_diag_cov(&[step(v(&[2.0]), v(&[1.0]))], 1.0).is_err());
    }

    #[test]
    fn full_cov_shifts_eigenvalues() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let flat = flatten_upper(&s).unwrap();
        let steps = vec![step(flat.clone(), v(&[0.01, 0.02, 0.01])); 3];
        let cfg = HpubConfig {
            n: 20_000,
            ..HpubConfig::default()
        };
        let est = estimate_full_cov(&steps, 0.05, &cfg, &mut stream::from_seed(3)).unwrap();
        let g = est.inflation_gamma[0];
        assert!(g > 0.0);
        assert!((&est.matrix - &s - DMatrix::identity(2, 2) * g).amax() < 1e-12);
        assert!(linalg::min_eigenvalue(&(&est.matrix - &s)) >= g - 1e-12);
    }

    #[test]
    fn psd_examples() {
        let m = DMatrix::from_diagonal(&v(&[1.0, -1.0]));
        assert_eq!(psd_projection(&m, 0.0).unwrap(), DMatrix::from_diagonal(&v(&[1.0, 0.0])));
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((psd_projection(&p, 0.0).unwrap() - &p).amax() < 1e-10);
        let mut bad = p.clone();
        bad[(0, 1)] = f64::NAN;
        assert!(psd_projection(&bad, 0.0).is_err());
    }

    #[test]
    fn theta_scaling() {
        struct RootN;
        impl Estimator for RootN {
            fn dim(&self, _: &Dataset) -> usize {
                1
            }
            fn fit(&self, _: &Dataset, _: &[u64]) -> Result<DVector<f64>> {
                Ok(v(&[0.0]))
            }
            fn convergence_rate(&self, n: f64) -> f64 {
                1.0 / n.sqrt()
            }
        }
        let est = PrivateCovEstimate {
            matrix: DMatrix::identity(2, 2) * 3.0,
            inflation_gamma: v(&[0.0, 0.0]),
            mode: CovMode::Diagonal,
        };
        let ols = crate::estimators::Ols::default();
        let b = scale_cov_for_theta(&est, 500, &ols, 100_000).unwrap();
        assert!((b.matrix() - DMatrix::identity(2, 2) * 1500.0).amax() < 1e-9);
        let b = scale_cov_for_theta(&est, 1, &ols, 100_000).unwrap();
        assert_eq!(b.matrix(), &est.matrix);
        let b = scale_cov_for_theta(&est, 4, &RootN, 100).unwrap();
        assert!((b.matrix() - DMatrix::identity(2, 2) * 6.0).amax() < 1e-12);
    }
}
