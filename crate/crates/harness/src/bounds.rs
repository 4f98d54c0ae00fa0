//! Experiment-only constructors for the analyst-supplied bounds.
//!
//! Every bound here is derived from the realized data or bootstrap output
//! and then inflated by an overestimation factor `c`. That simulates a
//! conservative analyst; it is not private, since the bounds look at the data.

use gvdp_core::aggregation::CovMode;
use gvdp_core::blb::{sample_covariance, BlbEstimates};
use gvdp_core::coinpress::{CovUpperBound, MeanBall, MvmOptions};
use gvdp_core::inference::{sigma_points, CiMode, GvdpConfig};
use gvdp_core::privacy::PrivacyBudget;
use gvdp_core::tail_bounds::{HpubConfig, TailFamily};
use gvdp_core::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Pipeline settings that do not depend on the data.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub k: usize,
    pub r: usize,
    pub t: usize,
    /// Total budget, split evenly between the two private stages.
    pub rho: f64,
    pub beta_theta: f64,
    pub beta_sigma: f64,
    pub beta_ub: f64,
    pub alpha: f64,
    pub family: TailFamily,
    pub cov_mode: CovMode,
    pub ci_mode: CiMode,
    pub mvm: MvmOptions,
    pub hpub: HpubConfig,
}

/// `B(m, c·max_j |m_j|)`.
fn inflated_ball(mean: DVector<f64>, c: f64) -> Result<MeanBall> {
    let radius = c * mean.amax();
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("cannot inflate a ball around the origin".into()));
    }
    MeanBall::new(mean, radius)
}

/// `c·diag(Ĉ)`, with `Ĉ` the sample covariance of the rows of `points`.
fn inflated_diag_cov(rows: &[DVector<f64>], c: f64) -> Result<CovUpperBound> {
    let cov = sample_covariance(rows);
    let diag = cov.diagonal() * c;
    let floor = diag.max() * 1e-12;
    CovUpperBound::diagonal(&diag.map(|v| v.max(floor)))
}

/// Configuration whose bounds are the bootstrap output's own moments
/// inflated by `c`: the parameter ball is `B(μ̂, c·max|μ̂_j|)`, and the
/// covariance stage gets the analogous ball and `c·diag(Σ̂)` bound for the
/// per-subset covariance statistics.
pub fn overestimated_config(blb: &BlbEstimates, c: f64, s: &PipelineSettings) -> Result<GvdpConfig> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidConfiguration(format!("overestimation factor must be positive, got {c}")));
    }
    let pts = sigma_points(blb, s.cov_mode)?;
    let rows: Vec<DVector<f64>> = pts.row_iter().map(|r| r.transpose()).collect();
    let sigma_mean = pts.row_mean().transpose();
    let half = PrivacyBudget::new(s.rho / 2.0)?;
    Ok(GvdpConfig {
        k: s.k,
        r: s.r,
        t: s.t,
        rho_theta: half,
        rho_sigma: half,
        beta_theta: s.beta_theta,
        beta_sigma: s.beta_sigma,
        beta_ub: s.beta_ub,
        family_theta: s.family.clone(),
        family_sigma: s.family.clone(),
        ball0_theta: inflated_ball(blb.mean_theta(), c)?,
        ball0_sigma: inflated_ball(sigma_mean, c)?,
        cov_bound_sigma: inflated_diag_cov(&rows, c)?,
        cov_mode: s.cov_mode,
        alphas: vec![s.alpha; blb.dim()],
        ci_mode: s.ci_mode,
        mvm: s.mvm,
        hpub: s.hpub,
    })
}

/// `(c·max_i ‖x_i‖₂, c·max_i |y_i|)`.
pub fn adassp_bounds(x: &DMatrix<f64>, y: &DVector<f64>, c: f64) -> (f64, f64) {
    let xb = x.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    (c * xb, c * y.amax())
}
