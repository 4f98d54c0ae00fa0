//! End-to-end private estimation and confidence intervals.
//!
//! [`gvdp`] runs the bootstrap, privately estimates the covariance of the
//! replicate distribution, uses it to standardize a private estimate of the
//! parameter, and builds per-coordinate intervals from both.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregation::{
    estimate_diag_cov, estimate_full_cov, flatten_upper, precision_weight_diag, psd_projection,
    scale_cov_for_theta, CovMode, PrivateCovEstimate,
};
use crate::blb::{blb_run, BlbEstimates, Dataset, Estimator};
use crate::coinpress::{mvm_rec, CovUpperBound, MeanBall, MvmOptions, StepEstimate};
use crate::error::{Error, Result, StageExt};
use crate::privacy::{compose_budgets, PrivacyBudget};
use crate::special::normal_quantile;
use crate::tail_bounds::{hpub, HpubConfig, RngAdapter, TailFamily};

/// Relative eigenvalue floor applied to the private covariance before it is
/// used to standardize the parameter stage.
pub const COV_FLOOR_REL: f64 = 1e-10;

/// How interval levels relate to the failure probabilities of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CiMode {
    /// Intervals at level `1 − α` that hold with probability
    /// `1 − β_Σ − β_ub − β_θ` over the privatization.
    #[default]
    HighProb,
    /// Levels shrunk to `α − β_Σ − β_ub − β_θ` so the intervals are valid
    /// unconditionally.
    ProbOne,
}

/// Everything [`gvdp`] needs beyond the data and the estimator.
#[derive(Debug, Clone)]
pub struct GvdpConfig {
    pub k: usize,
    pub r: usize,
    pub t: usize,
    pub rho_theta: PrivacyBudget,
    pub rho_sigma: PrivacyBudget,
    pub beta_theta: f64,
    pub beta_sigma: f64,
    pub beta_ub: f64,
    pub family_theta: TailFamily,
    pub family_sigma: TailFamily,
    /// Ball around the parameter, dimension `d`.
    pub ball0_theta: MeanBall,
    /// Ball around the covariance statistic: the variance vector (dimension
    /// `d`) in diagonal mode, the flattened upper triangle in full mode.
    pub ball0_sigma: MeanBall,
    /// Covariance bound for the covariance statistic, same dimension as `ball0_sigma`.
    pub cov_bound_sigma: CovUpperBound,
    pub cov_mode: CovMode,
    pub alphas: Vec<f64>,
    pub ci_mode: CiMode,
    pub mvm: MvmOptions,
    pub hpub: HpubConfig,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfiguration(format!("{name} must lie in (0, 1), got {p}")))
    }
}

impl GvdpConfig {
    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        self.ball0_theta.dim()
    }

    /// Dimension of the covariance statistic for the chosen mode.
    pub fn sigma_dim(&self) -> usize {
        let d = self.dim();
        match self.cov_mode {
            CovMode::Diagonal => d,
            CovMode::Full => d * (d + 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfiguration(m));
        if self.k == 0 || self.r < 2 || self.t == 0 {
            return bad(format!("need k ≥ 1, r ≥ 2, t ≥ 1 (got {}, {}, {})", self.k, self.r, self.t));
        }
        if self.rho_theta.rho() <= 0.0 || self.rho_sigma.rho() <= 0.0 {
            return bad("both privacy budgets must be positive".into());
        }
        check_prob("beta_theta", self.beta_theta)?;
        check_prob("beta_sigma", self.beta_sigma)?;
        check_prob("beta_ub", self.beta_ub)?;
        let d = self.dim();
        if self.alphas.len() != d {
            return bad(format!("{} alphas for dimension {d}", self.alphas.len()));
        }
        for &a in &self.alphas {
            check_prob("alpha", a)?;
        }
        if self.ci_mode == CiMode::ProbOne {
            adjust_alpha_prob_one(&self.alphas, self.beta_sigma, self.beta_ub, self.beta_theta)?;
        }
        let ds = self.sigma_dim();
        if self.ball0_sigma.dim() != ds || self.cov_bound_sigma.dim() != ds {
            return bad(format!(
                "covariance-stage ball and bound must have dimension {ds} in {:?} mode",
                self.cov_mode
            ));
        }
        Ok(())
    }

    /// Probability that the intervals are valid.
    pub fn guarantee_prob(&self) -> f64 {
        match self.ci_mode {
            CiMode::HighProb => 1.0 - self.beta_sigma - self.beta_ub - self.beta_theta,
            CiMode::ProbOne => 1.0,
        }
    }
}

/// Per-stage detail kept alongside the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub sigma_steps: Vec<StepEstimate>,
    pub theta_steps: Vec<StepEstimate>,
    /// Interval levels actually used.
    pub alphas: Vec<f64>,
    /// False if any clipping radius came from an unguaranteed estimate.
    pub guaranteed: bool,
}

impl Diagnostics {
    /// Budget of every Gaussian-mechanism call, in call order.
    pub fn mechanism_budgets(&self) -> Vec<PrivacyBudget> {
        self.sigma_steps
            .iter()
            .chain(&self.theta_steps)
            .map(|s| s.budget)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GvdpResult {
    pub theta_tilde: DVector<f64>,
    /// Variance of the privatizing noise in `theta_tilde`, per coordinate.
    pub theta_noise_variance: DVector<f64>,
    pub sigma_tilde: PrivateCovEstimate,
    pub intervals: Vec<(f64, f64)>,
    pub total_budget: PrivacyBudget,
    pub guarantee_prob: f64,
    pub diagnostics: Diagnostics,
}

/// Subtracts the pipeline's failure probabilities from every level.
pub fn adjust_alpha_prob_one(
    alphas: &[f64],
    beta_sigma: f64,
    beta_ub: f64,
    beta_theta: f64,
) -> Result<Vec<f64>> {
    alphas
        .iter()
        .enumerate()
        .map(|(j, &a)| {
            let adj = a - beta_sigma - beta_ub - beta_theta;
            if adj > 0.0 {
                Ok(adj)
            } else {
                Err(Error::InvalidConfiguration(format!(
                    "alpha for dimension {j} ({a}) does not exceed the failure probabilities \
                     beta_sigma + beta_ub + beta_theta = {}",
                    beta_sigma + beta_ub + beta_theta
                )))
            }
        })
        .collect()
}

fn check_alphas(alphas: &[f64], d: usize) -> Result<()> {
    if alphas.len() != d {
        return Err(Error::invalid(format!("{} alphas for dimension {d}", alphas.len())));
    }
    for &a in alphas {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {a}")));
        }
    }
    Ok(())
}

/// `θ̃_j ± Φ⁻¹(1 − α_j/2)·√v_j`.
pub fn gaussian_ci_closed_form(
    theta: &DVector<f64>,
    total_variance: &DVector<f64>,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_alphas(alphas, theta.len())?;
    if total_variance.len() != theta.len() || total_variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("interval variances must be positive"));
    }
    theta
        .iter()
        .zip(total_variance.iter())
        .zip(alphas)
        .map(|((&m, &v), &a)| {
            let h = normal_quantile(1.0 - a / 2.0)? * v.sqrt();
            Ok((m - h, m + h))
        })
        .collect()
}

/// `θ̃_j ± √(v_j/α_j)`, valid for any distribution with that variance.
pub fn chebyshev_ci(
    theta: &DVector<f64>,
    total_variance: &DVector<f64>,
    alphas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_alphas(alphas, theta.len())?;
    if total_variance.len() != theta.len() || total_variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("interval variances must be positive"));
    }
    Ok(theta
        .iter()
        .zip(total_variance.iter())
        .zip(alphas)
        .map(|((&m, &v), &a)| {
            let h = (v / a).sqrt();
            (m - h, m + h)
        })
        .collect())
}

/// Symmetric intervals for `μ_j + gauss_sd_j·Z + scale_j·R_j`, where `R` is a
/// standardized draw from `family`: the upper end is a high-probability upper
/// bound at `α_j/2`, mirrored about `μ_j`.
pub fn compound_ci_simulation<R: Rng + ?Sized>(
    family: &TailFamily,
    mu: &DVector<f64>,
    scale: &DVector<f64>,
    gauss_sd: &DVector<f64>,
    alphas: &[f64],
    cfg: &HpubConfig,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let d = mu.len();
    check_alphas(alphas, d)?;
    if scale.len() != d || gauss_sd.len() != d {
        return Err(Error::invalid("scale vectors must match the dimension"));
    }
    if scale.iter().chain(gauss_sd.iter()).any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::invalid("scales must be nonnegative and finite"));
    }
    let mut rng = RngAdapter(rng);
    let mut buf = vec![0.0; d];
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s, g) = (mu[j], scale[j], gauss_sd[j]);
        let upper = hpub(
            |r: &mut RngAdapter<'_, R>| {
                family.sample_standardized(r, &mut buf)?;
                let z: f64 = StandardNormal.sample(r);
                Ok(m + g * z + s * buf[j])
            },
            alphas[j] / 2.0,
            cfg,
            &mut rng,
        )?;
        let c = upper - m;
        out.push((m - c, m + c));
    }
    Ok(out)
}

/// Symmetric intervals for the location-scale marginals `μ_j + scale_j·R_j`.
pub fn ci_simulation<R: Rng + ?Sized>(
    family: &TailFamily,
    mu: &DVector<f64>,
    scale: &DVector<f64>,
    alphas: &[f64],
    cfg: &HpubConfig,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let zeros = DVector::zeros(mu.len());
    compound_ci_simulation(family, mu, scale, &zeros, alphas, cfg, rng)
}

/// Stacks vectors as the rows of a matrix.
fn rows_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// The per-subset covariance statistic in the layout the configured mode expects.
pub fn sigma_points(blb: &BlbEstimates, mode: CovMode) -> Result<DMatrix<f64>> {
    let rows = blb
        .sigma
        .iter()
        .map(|s| match mode {
            CovMode::Diagonal => Ok(s.diagonal()),
            CovMode::Full => flatten_upper(s),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows_matrix(&rows))
}

/// Runs the bootstrap once, then the private stages.
pub fn gvdp<E, R>(data: &Dataset, est: &E, config: &GvdpConfig, rng: &mut R) -> Result<GvdpResult>
where
    E: Estimator + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let blb = blb_run(data, est, config.k, config.r, rng).stage("bootstrap")?;
    gvdp_from_blb(&blb, est, config, rng)
}

/// The private stages on precomputed bootstrap output.
pub fn gvdp_from_blb<E, R>(
    blb: &BlbEstimates,
    est: &E,
    config: &GvdpConfig,
    rng: &mut R,
) -> Result<GvdpResult>
where
    E: Estimator + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let d = config.dim();
    if blb.dim() != d {
        return Err(Error::InvalidConfiguration(format!(
            "estimator has dimension {}, configuration has {d}",
            blb.dim()
        )));
    }
    if blb.k != config.k {
        return Err(Error::InvalidConfiguration("bootstrap k differs from configuration".into()));
    }

    let sigma_steps = mvm_rec(
        &sigma_points(blb, config.cov_mode)?,
        &config.ball0_sigma,
        &config.cov_bound_sigma,
        &config.family_sigma,
        config.t,
        config.rho_sigma,
        config.beta_sigma,
        &config.mvm,
        rng,
    )
    .stage("covariance estimation")?;
    let raw = match config.cov_mode {
        CovMode::Diagonal => estimate_diag_cov(&sigma_steps, config.beta_ub),
        CovMode::Full => estimate_full_cov(&sigma_steps, config.beta_ub, &config.hpub, rng),
    }
    .stage("covariance bound")?;
    let trace = raw.matrix.trace();
    if !(trace > 0.0) {
        return Err(Error::invalid(format!(
            "private covariance estimate has trace {trace}; it cannot bound a covariance"
        ))
        .in_stage("covariance bound"));
    }
    let sigma_tilde = PrivateCovEstimate {
        matrix: psd_projection(&raw.matrix, COV_FLOOR_REL * trace / d as f64).stage("covariance bound")?,
        ..raw
    };

    let cov_theta = scale_cov_for_theta(&sigma_tilde, config.k, est, blb.n).stage("parameter estimation")?;
    let theta_steps = mvm_rec(
        &rows_matrix(&blb.theta),
        &config.ball0_theta,
        &cov_theta,
        &config.family_theta,
        config.t,
        config.rho_theta,
        config.beta_theta,
        &config.mvm,
        rng,
    )
    .stage("parameter estimation")?;
    let centers: Vec<_> = theta_steps.iter().map(|s| s.center.clone()).collect();
    let vars: Vec<_> = theta_steps.iter().map(|s| s.noise_variances.clone()).collect();
    let (theta_tilde, theta_var) = precision_weight_diag(&centers, &vars).stage("parameter estimation")?;

    let alphas = match config.ci_mode {
        CiMode::HighProb => config.alphas.clone(),
        CiMode::ProbOne => {
            adjust_alpha_prob_one(&config.alphas, config.beta_sigma, config.beta_ub, config.beta_theta)?
        }
    };
    let sigma_diag = sigma_tilde.matrix.diagonal();
    let intervals = match &config.family_theta {
        TailFamily::Gaussian => gaussian_ci_closed_form(&theta_tilde, &(&sigma_diag + &theta_var), &alphas),
        TailFamily::ChebyshevGeneric => chebyshev_ci(&theta_tilde, &(&sigma_diag + &theta_var), &alphas),
        family => compound_ci_simulation(
            family,
            &theta_tilde,
            &sigma_diag.map(f64::sqrt),
            &theta_var.map(f64::sqrt),
            &alphas,
            &config.hpub,
            rng,
        ),
    }
    .stage("confidence intervals")?;

    let sigma_spent = compose_budgets(&sigma_steps.iter().map(|s| s.budget).collect::<Vec<_>>());
    let theta_spent = compose_budgets(&theta_steps.iter().map(|s| s.budget).collect::<Vec<_>>());
    let total_budget = sigma_spent.compose(theta_spent);
    if sigma_spent != config.rho_sigma
        || theta_spent != config.rho_theta
        || total_budget != config.rho_sigma.compose(config.rho_theta)
    {
        return Err(Error::invalid(format!(
            "budget accounting mismatch: spent {} + {}, configured {} + {}",
            sigma_spent.rho(),
            theta_spent.rho(),
            config.rho_sigma.rho(),
            config.rho_theta.rho()
        ))
        .in_stage("accounting"));
    }

    let guaranteed = sigma_steps.iter().chain(&theta_steps).all(|s| s.guaranteed);
    Ok(GvdpResult {
        theta_tilde,
        theta_noise_variance: theta_var,
        sigma_tilde,
        intervals,
        total_budget,
        guarantee_prob: config.guarantee_prob(),
        diagnostics: Diagnostics {
            sigma_steps,
            theta_steps,
            alphas,
            guaranteed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ColumnMeans, Constant};
    use crate::privacy::Noise;
    use crate::stream;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn closed_form_examples() {
        let ci = gaussian_ci_closed_form(&v(&[0.0]), &v(&[1.0]), &[0.05]).unwrap();
        assert!((ci[0].1 - 1.959_963_984_540_054).abs() < 1e-9);
        let ci4 = gaussian_ci_closed_form(&v(&[0.0]), &v(&[4.0]), &[0.05]).unwrap();
        assert!((ci4[0].1 - 2.0 * ci[0].1).abs() < 1e-12);
        let half = gaussian_ci_closed_form(&v(&[3.0]), &v(&[1.0]), &[0.5]).unwrap();
        assert!((half[0].1 - 3.0 - 0.674_489_750_196_081_7).abs() < 1e-9);
        assert!(gaussian_ci_closed_form(&v(&[0.0]), &v(&[0.0]), &[0.05]).is_err());
    }

    #[test]
    fn adjust_alpha_examples() {
        let a = adjust_alpha_prob_one(&[0.05], 0.01, 0.005, 0.005).unwrap();
        assert!((a[0] - 0.03).abs() < 1e-15);
        assert_eq!(adjust_alpha_prob_one(&[0.05, 0.1], 0.0, 0.0, 0.0).unwrap(), vec![0.05, 0.1]);
        let err = adjust_alpha_prob_one(&[0.1, 0.02], 0.01, 0.005, 0.005).unwrap_err();
        assert!(err.to_string().contains("dimension 1"), "{err}");
    }

    #[test]
    fn simulated_gaussian_interval() {
        let mut rng = stream::from_seed(4);
        let ci = ci_simulation(
            &TailFamily::Gaussian,
            &v(&[2.0]),
            &v(&[1.0]),
            &[0.05],
            &HpubConfig::default(),
            &mut rng,
        )
        .unwrap();
        let half = ci[0].1 - 2.0;
        assert!((1.959_96..=2.2).contains(&half), "{half}");
        assert_eq!(ci[0].0 + ci[0].1, 4.0);
        assert!(ci_simulation(
            &TailFamily::Gaussian,
            &v(&[0.0]),
            &v(&[1.0]),
            &[1.0],
            &HpubConfig::default(),
            &mut rng
        )
        .is_err());
    }

    fn config(d: usize, c: f64, mode: CovMode) -> GvdpConfig {
        let ds = match mode {
            CovMode::Diagonal => d,
            CovMode::Full => d * (d + 1) / 2,
        };
        GvdpConfig {
            k: 20,
            r: 10,
            t: 3,
            rho_theta: PrivacyBudget::new(0.5).unwrap(),
            rho_sigma: PrivacyBudget::new(0.5).unwrap(),
            beta_theta: 0.01,
            beta_sigma: 0.01,
            beta_ub: 0.01,
            family_theta: TailFamily::Gaussian,
            family_sigma: TailFamily::Gaussian,
            ball0_theta: MeanBall::new(DVector::from_element(d, c), 10.0).unwrap(),
            ball0_sigma: MeanBall::new(DVector::zeros(ds), 1.0).unwrap(),
            cov_bound_sigma: CovUpperBound::identity(ds),
            cov_mode: mode,
            alphas: vec![0.05; d],
            ci_mode: CiMode::HighProb,
            mvm: MvmOptions::default(),
            hpub: HpubConfig {
                n: 20_000,
                ..HpubConfig::default()
            },
        }
    }

    #[test]
    fn constant_estimator_pipeline() {
        let data = Dataset::new((0..400).map(f64::from).collect(), 1, None).unwrap();
        let c = v(&[1.5, -0.5]);
        let mut cfg = config(2, 0.0, CovMode::Diagonal);
        cfg.mvm.noise = Noise::Disabled;
        let res = gvdp(&data, &Constant(c.clone()), &cfg, &mut stream::from_seed(1)).unwrap();
        assert!((&res.theta_tilde - &c).amax() < 1e-12);
        for (j, &(lo, hi)) in res.intervals.iter().enumerate() {
            assert!(lo <= c[j] && c[j] <= hi);
        }
        assert_eq!(res.total_budget.rho(), 1.0);
        assert!((res.guarantee_prob - 0.97).abs() < 1e-15);
    }

    #[test]
    fn pipeline_is_reproducible_and_covers() {
        let mut rng = stream::from_seed(10);
        let rows: Vec<Vec<f64>> = (0..20_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![a, 3.0 + 2.0 * b]
            })
            .collect();
        let data = Dataset::from_rows(&rows, None).unwrap();
        for mode in [CovMode::Diagonal, CovMode::Full] {
            let mut cfg = config(2, 0.0, mode);
            cfg.k = 100;
            cfg.ball0_theta = MeanBall::new(v(&[0.0, 3.0]), 10.0).unwrap();
            let ds = cfg.sigma_dim();
            cfg.ball0_sigma = MeanBall::new(DVector::zeros(ds), 0.01).unwrap();
            cfg.cov_bound_sigma = CovUpperBound::new(DMatrix::identity(ds, ds) * 1e-6).unwrap();
            let a = gvdp(&data, &ColumnMeans, &cfg, &mut stream::from_seed(3)).unwrap();
            let b = gvdp(&data, &ColumnMeans, &cfg, &mut stream::from_seed(3)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.diagnostics.mechanism_budgets().len(), 2 * cfg.t);
            for (j, &(lo, hi)) in a.intervals.iter().enumerate() {
                assert!(lo < hi);
                assert!((lo + hi) / 2.0 - a.theta_tilde[j] < 1e-12);
            }
            assert!((a.theta_tilde[1] - 3.0).abs() < 0.2, "{}", a.theta_tilde);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = config(2, 0.0, CovMode::Diagonal);
        cfg.ci_mode = CiMode::ProbOne;
        cfg.alphas = vec![0.05, 0.03];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfiguration(_))));
        let mut cfg = config(2, 0.0, CovMode::Full);
        cfg.ball0_sigma = MeanBall::new(DVector::zeros(2), 1.0).unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = config(2, 0.0, CovMode::Diagonal);
        cfg.t = 0;
        assert!(cfg.validate().is_err());
    }
}
