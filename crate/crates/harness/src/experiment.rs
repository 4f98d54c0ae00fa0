//! Experiment configuration, per-trial execution, CSV rows and summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::PathBuf;

use gvdp_core::aggregation::CovMode;
use gvdp_core::blb::{blb_run, Dataset, Estimator};
use gvdp_core::coinpress::{Centering, MvmOptions};
use gvdp_core::estimators::{Logistic, Ols};
use gvdp_core::inference::{gaussian_ci_closed_form, gvdp_from_blb, CiMode};
use gvdp_core::privacy::{Noise, PrivacyBudget};
use gvdp_core::special::normal_quantile;
use gvdp_core::stream;
use gvdp_core::tail_bounds::{GammaMode, HpubConfig, TailFamily};
use gvdp_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adassp::adassp;
use crate::bounds::{adassp_bounds, overestimated_config, PipelineSettings};
use crate::data::{clip_quantile, generate_linear, generate_logistic_imbalanced};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ClippingDemo,
    OlsCoverage,
    LogisticCoverage,
    AdasspCompare,
    LaplaceFamily,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ClippingDemo => "clipping_demo",
            ExperimentKind::OlsCoverage => "ols_coverage",
            ExperimentKind::LogisticCoverage => "logistic_coverage",
            ExperimentKind::AdasspCompare => "adassp_compare",
            ExperimentKind::LaplaceFamily => "laplace_family",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaModeName {
    Analytic,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovModeName {
    Diagonal,
    Full,
}

/// A config file or command line, before defaults are filled in. Every field
/// is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialConfig {
    pub kind: Option<ExperimentKind>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub t: Option<usize>,
    pub r: Option<usize>,
    pub rho: Option<f64>,
    #[serde(alias = "of")]
    pub overestimation_factor: Option<f64>,
    pub factors: Option<Vec<f64>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub beta_theta: Option<f64>,
    pub beta_sigma: Option<f64>,
    pub beta_ub: Option<f64>,
    pub coef: Option<f64>,
    pub noise_sd: Option<f64>,
    pub clip_percents: Option<Vec<f64>>,
    pub gamma_mode: Option<GammaModeName>,
    pub cov_mode: Option<CovModeName>,
    pub approx_draws: Option<usize>,
    pub hpub_draws: Option<usize>,
}

impl PartialConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfiguration(e.to_string()))
    }

    /// Fields set in `other` win.
    pub fn merge(self, other: PartialConfig) -> PartialConfig {
        macro_rules! pick {
            ($($f:ident),*) => { PartialConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            kind, n, k, d, t, r, rho, overestimation_factor, factors, trials, seed, output, alpha,
            beta_theta, beta_sigma, beta_ub, coef, noise_sd, clip_percents, gamma_mode, cov_mode,
            approx_draws, hpub_draws
        )
    }
}

/// A fully specified experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub t: usize,
    /// Bootstrap replicates per subset.
    pub r: usize,
    pub rho: f64,
    pub overestimation_factor: f64,
    /// Factors swept by `adassp_compare`.
    pub factors: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub alpha: f64,
    pub beta_theta: f64,
    pub beta_sigma: f64,
    pub beta_ub: f64,
    /// Every true coefficient equals this value.
    pub coef: f64,
    pub noise_sd: f64,
    pub clip_percents: Vec<f64>,
    pub gamma_mode: GammaModeName,
    pub cov_mode: CovModeName,
    pub approx_draws: usize,
    pub hpub_draws: usize,
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            kind,
            n: 50_000,
            k: 250,
            d: 5,
            t: 5,
            r: 50,
            rho: 0.1,
            overestimation_factor: 100.0,
            factors: vec![1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 10.0, 1000.0, 10_000.0],
            trials: 20,
            seed: 0,
            output: None,
            alpha: 0.05,
            beta_theta: 0.01,
            beta_sigma: 0.01,
            beta_ub: 0.01,
            coef: 1.0,
            noise_sd: 10.0,
            clip_percents: vec![0.0, 0.1, 1.0, 5.0],
            gamma_mode: GammaModeName::Analytic,
            cov_mode: CovModeName::Diagonal,
            approx_draws: 100_000,
            hpub_draws: 100_000,
        };
        match kind {
            ExperimentKind::ClippingDemo => ExperimentConfig {
                n: 10_000,
                d: 1,
                trials: 1000,
                coef: 100.0,
                ..base
            },
            ExperimentKind::LogisticCoverage => ExperimentConfig {
                n: 100_000,
                coef: 0.5,
                ..base
            },
            ExperimentKind::AdasspCompare => ExperimentConfig { coef: 100.0, ..base },
            _ => base,
        }
    }

    /// Fills unset fields with the defaults for the configured kind
    /// (`ols_coverage` if none).
    pub fn resolve(p: PartialConfig) -> Result<Self> {
        let d = ExperimentConfig::defaults(p.kind.unwrap_or(ExperimentKind::OlsCoverage));
        let cfg = ExperimentConfig {
            kind: d.kind,
            n: p.n.unwrap_or(d.n),
            k: p.k.unwrap_or(d.k),
            d: p.d.unwrap_or(d.d),
            t: p.t.unwrap_or(d.t),
            r: p.r.unwrap_or(d.r),
            rho: p.rho.unwrap_or(d.rho),
            overestimation_factor: p.overestimation_factor.unwrap_or(d.overestimation_factor),
            factors: p.factors.unwrap_or(d.factors),
            trials: p.trials.unwrap_or(d.trials),
            seed: p.seed.unwrap_or(d.seed),
            output: p.output.or(d.output),
            alpha: p.alpha.unwrap_or(d.alpha),
            beta_theta: p.beta_theta.unwrap_or(d.beta_theta),
            beta_sigma: p.beta_sigma.unwrap_or(d.beta_sigma),
            beta_ub: p.beta_ub.unwrap_or(d.beta_ub),
            coef: p.coef.unwrap_or(d.coef),
            noise_sd: p.noise_sd.unwrap_or(d.noise_sd),
            clip_percents: p.clip_percents.unwrap_or(d.clip_percents),
            gamma_mode: p.gamma_mode.unwrap_or(d.gamma_mode),
            cov_mode: p.cov_mode.unwrap_or(d.cov_mode),
            approx_draws: p.approx_draws.unwrap_or(d.approx_draws),
            hpub_draws: p.hpub_draws.unwrap_or(d.hpub_draws),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfiguration(m.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.d == 0 || self.n <= self.d {
            return bad("need n > d ≥ 1");
        }
        if self.kind != ExperimentKind::ClippingDemo {
            if self.k == 0 || 2 * self.k > self.n {
                return bad("need 1 ≤ k ≤ n/2");
            }
            if self.t == 0 || self.r < 2 {
                return bad("need t ≥ 1 and r ≥ 2");
            }
            if !(self.rho > 0.0 && self.rho.is_finite()) {
                return bad("rho must be positive");
            }
            if !(self.overestimation_factor > 0.0) || self.factors.iter().any(|&c| !(c > 0.0)) {
                return bad("overestimation factors must be positive");
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.clip_percents.iter().any(|&p| !(0.0..100.0).contains(&p)) {
            return bad("clip percents must lie in [0, 100)");
        }
        if !(self.noise_sd >= 0.0) || !self.coef.is_finite() {
            return bad("noise_sd must be nonnegative and coef finite");
        }
        Ok(())
    }

    /// Pipeline settings for this experiment with the given tail family.
    pub fn settings(&self, family: TailFamily) -> PipelineSettings {
        PipelineSettings {
            k: self.k,
            r: self.r,
            t: self.t,
            rho: self.rho,
            beta_theta: self.beta_theta,
            beta_sigma: self.beta_sigma,
            beta_ub: self.beta_ub,
            alpha: self.alpha,
            family,
            cov_mode: match self.cov_mode {
                CovModeName::Diagonal => CovMode::Diagonal,
                CovModeName::Full => CovMode::Full,
            },
            ci_mode: CiMode::HighProb,
            mvm: MvmOptions {
                noise: Noise::Gaussian,
                gamma_mode: match self.gamma_mode {
                    GammaModeName::Analytic => GammaMode::Analytic,
                    GammaModeName::Approximate => GammaMode::Approximate,
                },
                approx_draws: self.approx_draws,
                centering: Centering::BallCenter,
            },
            hpub: HpubConfig {
                n: self.hpub_draws,
                ..HpubConfig::default()
            },
        }
    }

    fn beta(&self) -> Vec<f64> {
        vec![self.coef; self.d]
    }
}

/// One estimated coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trial: usize,
    pub dim: usize,
    #[serde(rename = "true")]
    pub truth: f64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub method: String,
}

impl ResultRow {
    pub fn new(trial: usize, dim: usize, truth: f64, estimate: f64, ci: Option<(f64, f64)>, method: &str) -> Self {
        let (ci_lo, ci_hi) = ci.unwrap_or((f64::NAN, f64::NAN));
        ResultRow {
            trial,
            dim,
            truth,
            estimate,
            ci_lo,
            ci_hi,
            covered: ci_lo <= truth && truth <= ci_hi,
            method: method.to_string(),
        }
    }

    pub fn has_interval(&self) -> bool {
        self.ci_lo.is_finite() && self.ci_hi.is_finite()
    }
}

fn rows_for(
    trial: usize,
    method: &str,
    truth: &[f64],
    est: &DVector<f64>,
    intervals: Option<&[(f64, f64)]>,
) -> Vec<ResultRow> {
    (0..truth.len())
        .map(|j| ResultRow::new(trial, j, truth[j], est[j], intervals.map(|ci| ci[j]), method))
        .collect()
}

/// A trial (or one method within it) that raised an error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub trial: usize,
    pub method: String,
    pub message: String,
}

/// Aggregate statistics for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub estimates: usize,
    pub intervals: usize,
    pub covered: usize,
    pub coverage: f64,
    pub mean_abs_error: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub trials: usize,
    pub methods: Vec<MethodSummary>,
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn from_rows(kind: ExperimentKind, trials: usize, rows: &[ResultRow], failures: &[TrialFailure]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, (usize, usize, usize, f64)> = BTreeMap::new();
        for r in rows {
            if !acc.contains_key(&r.method) {
                order.push(r.method.clone());
            }
            let e = acc.entry(r.method.clone()).or_default();
            e.0 += 1;
            if r.has_interval() {
                e.1 += 1;
                e.2 += usize::from(r.covered);
            }
            e.3 += (r.estimate - r.truth).abs();
        }
        for f in failures {
            if !acc.contains_key(&f.method) {
                order.push(f.method.clone());
                acc.insert(f.method.clone(), Default::default());
            }
        }
        let methods = order
            .into_iter()
            .map(|m| {
                let (est, iv, cov, err) = acc[&m];
                MethodSummary {
                    failures: failures.iter().filter(|f| f.method == m).count(),
                    coverage: if iv > 0 { cov as f64 / iv as f64 } else { f64::NAN },
                    mean_abs_error: if est > 0 { err / est as f64 } else { f64::NAN },
                    method: m,
                    estimates: est,
                    intervals: iv,
                    covered: cov,
                }
            })
            .collect();
        Summary { kind, trials, methods }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} trials)", self.kind.name(), self.trials)?;
        writeln!(
            f,
            "{:<24} {:>9} {:>10} {:>10} {:>14} {:>9}",
            "method", "estimates", "intervals", "coverage", "mean |error|", "failures"
        )?;
        for m in &self.methods {
            let cov = if m.coverage.is_nan() { "-".to_string() } else { format!("{:.4}", m.coverage) };
            writeln!(
                f,
                "{:<24} {:>9} {:>10} {:>10} {:>14.6} {:>9}",
                m.method, m.estimates, m.intervals, cov, m.mean_abs_error, m.failures
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<TrialFailure>,
    pub summary: Summary,
}

/// Writes rows with the header `trial,dim,true,estimate,ci_lo,ci_hi,covered,method`.
pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Point estimates with one interval per coordinate.
pub type EstimateWithIntervals = (DVector<f64>, Vec<(f64, f64)>);

/// Ordinary least squares with classical normal-theory intervals.
pub fn ols_with_intervals(data: &Dataset, alpha: f64) -> Result<EstimateWithIntervals> {
    let (x, y) = design(data)?;
    let n = x.nrows();
    let d = x.ncols();
    let gram = x.transpose() * &x;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularFit("design matrix is rank deficient".into()))?;
    let beta = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (n - d) as f64;
    let inv = chol.inverse();
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let ci = (0..d)
        .map(|j| {
            let h = z * (s2 * inv[(j, j)]).sqrt();
            (beta[j] - h, beta[j] + h)
        })
        .collect();
    Ok((beta, ci))
}

/// Covariates and response as dense matrices.
pub fn design(data: &Dataset) -> Result<(DMatrix<f64>, DVector<f64>)> {
    data.response()
        .ok_or_else(|| Error::InvalidArgument("dataset has no response column".into()))?;
    let n = data.nrows();
    let p = data.n_features();
    let mut x = DMatrix::zeros(n, p);
    let mut buf = Vec::with_capacity(p);
    for i in 0..n {
        data.features_into(i, &mut buf);
        for (j, v) in buf.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let y = DVector::from_iterator(n, (0..n).map(|i| data.response_value(i).unwrap_or_default()));
    Ok((x, y))
}

type TrialResult = (Vec<ResultRow>, Vec<TrialFailure>);

fn fail(trial: usize, method: &str, e: Error) -> TrialFailure {
    TrialFailure {
        trial,
        method: method.to_string(),
        message: e.to_string(),
    }
}

fn clipping_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let mut rng = stream::child(cfg.seed, trial as u32, 0);
    let beta = cfg.beta();
    let data = generate_linear(cfg.n, cfg.d, &beta, cfg.noise_sd, &mut rng)?;
    let y = data.column(cfg.d);
    let mut rows = Vec::new();
    for &p in &cfg.clip_percents {
        let clipped = clip_quantile(&y, p)?;
        let mut values = Vec::with_capacity(cfg.n * (cfg.d + 1));
        for (row, yc) in data.rows().zip(&clipped) {
            values.extend_from_slice(&row[..cfg.d]);
            values.push(*yc);
        }
        let c = Dataset::new(values, cfg.d + 1, Some(cfg.d))?;
        let (b, ci) = ols_with_intervals(&c, cfg.alpha)?;
        rows.extend(rows_for(trial, &format!("clip_{p}"), &beta, &b, Some(&ci)));
    }
    Ok((rows, Vec::new()))
}

/// Non-private reference rows: full-data OLS with classical intervals, and
/// the bootstrap's own mean with intervals from its mean covariance.
fn reference_rows(
    trial: usize,
    truth: &[f64],
    blb: &gvdp_core::blb::BlbEstimates,
    alpha: f64,
) -> Result<Vec<ResultRow>> {
    let mean = blb.mean_theta();
    let var = blb.mean_sigma().diagonal();
    let ci = gaussian_ci_closed_form(&mean, &var, &vec![alpha; mean.len()])?;
    Ok(rows_for(trial, "blb", truth, &mean, Some(&ci)))
}

#[allow(clippy::too_many_arguments)]
fn coverage_trial<E: Estimator>(
    cfg: &ExperimentConfig,
    trial: usize,
    data: &Dataset,
    est: &E,
    truth: &[f64],
    family: TailFamily,
    method: &str,
    rng: &mut stream::StreamRng,
) -> TrialResult {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let blb = match blb_run(data, est, cfg.k, cfg.r, rng) {
        Ok(b) => b,
        Err(e) => return (rows, vec![fail(trial, method, e.in_stage("bootstrap"))]),
    };
    match reference_rows(trial, truth, &blb, cfg.alpha) {
        Ok(r) => rows.extend(r),
        Err(e) => failures.push(fail(trial, "blb", e)),
    }
    let settings = cfg.settings(family);
    let res = overestimated_config(&blb, cfg.overestimation_factor, &settings)
        .and_then(|g| gvdp_from_blb(&blb, est, &g, rng));
    match res {
        Ok(r) => rows.extend(rows_for(trial, method, truth, &r.theta_tilde, Some(&r.intervals))),
        Err(e) => failures.push(fail(trial, method, e)),
    }
    (rows, failures)
}

fn ols_trial(cfg: &ExperimentConfig, trial: usize, family: TailFamily, method: &str) -> Result<TrialResult> {
    let mut rng = stream::child(cfg.seed, trial as u32, 0);
    let beta = cfg.beta();
    let data = generate_linear(cfg.n, cfg.d, &beta, cfg.noise_sd, &mut rng)?;
    let (mut rows, failures) = coverage_trial(cfg, trial, &data, &Ols::default(), &beta, family, method, &mut rng);
    let (b, ci) = ols_with_intervals(&data, cfg.alpha)?;
    rows.extend(rows_for(trial, "ols", &beta, &b, Some(&ci)));
    Ok((rows, failures))
}

/// Rows used to approximate the population logistic fit, which is the
/// target parameter of the misspecified imbalanced model.
pub const LOGISTIC_REFERENCE_ROWS: usize = 2_000_000;

fn logistic_estimator() -> Logistic {
    Logistic {
        intercept: true,
        ..Logistic::default()
    }
}

/// Pseudo-true logistic coefficients (intercept first) from one large sample.
pub fn logistic_reference(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut rng = stream::child(cfg.seed, u32::MAX, u32::MAX);
    let n = LOGISTIC_REFERENCE_ROWS.max(cfg.n);
    let data = generate_logistic_imbalanced(n, cfg.d, &cfg.beta(), &mut rng)?;
    Ok(logistic_estimator().fit(&data, &vec![1; n])?.iter().copied().collect())
}

fn logistic_trial(cfg: &ExperimentConfig, trial: usize, truth: &[f64]) -> Result<TrialResult> {
    let mut rng = stream::child(cfg.seed, trial as u32, 0);
    let data = generate_logistic_imbalanced(cfg.n, cfg.d, &cfg.beta(), &mut rng)?;
    Ok(coverage_trial(
        cfg,
        trial,
        &data,
        &logistic_estimator(),
        truth,
        TailFamily::Gaussian,
        "gvdp",
        &mut rng,
    ))
}

fn factor_tag(c: f64) -> String {
    format!("{c}")
}

fn adassp_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let mut rng = stream::child(cfg.seed, trial as u32, 0);
    let beta = cfg.beta();
    let data = generate_linear(cfg.n, cfg.d, &beta, cfg.noise_sd, &mut rng)?;
    let (x, y) = design(&data)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let (b, ci) = ols_with_intervals(&data, cfg.alpha)?;
    rows.extend(rows_for(trial, "nonprivate", &beta, &b, Some(&ci)));

    let est = Ols::default();
    let blb = blb_run(&data, &est, cfg.k, cfg.r, &mut rng).map_err(|e| e.in_stage("bootstrap"))?;
    let settings = cfg.settings(TailFamily::Gaussian);
    let rho = PrivacyBudget::new(cfg.rho)?;
    for &c in &cfg.factors {
        let tag = factor_tag(c);
        let (xb, yb) = adassp_bounds(&x, &y, c);
        let method = format!("adassp@{tag}");
        match adassp(&x, &y, xb, yb, rho, Noise::Gaussian, &mut rng) {
            Ok(b) => rows.extend(rows_for(trial, &method, &beta, &b, None)),
            Err(e) => failures.push(fail(trial, &method, e)),
        }
        let method = format!("gvdp@{tag}");
        match overestimated_config(&blb, c, &settings).and_then(|g| gvdp_from_blb(&blb, &est, &g, &mut rng)) {
            Ok(r) => rows.extend(rows_for(trial, &method, &beta, &r.theta_tilde, Some(&r.intervals))),
            Err(e) => failures.push(fail(trial, &method, e)),
        }
    }
    Ok((rows, failures))
}

/// Runs every trial (in parallel, each on its own stream) and summarizes.
/// Errors inside a trial are recorded and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let truth = match cfg.kind {
        ExperimentKind::LogisticCoverage => Some(logistic_reference(cfg).map_err(|e| e.in_stage("reference fit"))?),
        _ => None,
    };
    let laplace_tag = match cfg.gamma_mode {
        GammaModeName::Analytic => "gvdp_laplace_analytic",
        GammaModeName::Approximate => "gvdp_laplace_approximate",
    };
    let outcomes: Vec<(usize, Result<TrialResult>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let res = match cfg.kind {
                ExperimentKind::ClippingDemo => clipping_trial(cfg, trial),
                ExperimentKind::OlsCoverage => ols_trial(cfg, trial, TailFamily::Gaussian, "gvdp"),
                ExperimentKind::LaplaceFamily => ols_trial(cfg, trial, TailFamily::Laplace, laplace_tag),
                ExperimentKind::LogisticCoverage => {
                    logistic_trial(cfg, trial, truth.as_deref().expect("reference computed"))
                }
                ExperimentKind::AdasspCompare => adassp_trial(cfg, trial),
            };
            (trial, res)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (trial, res) in outcomes {
        match res {
            Ok((r, f)) => {
                rows.extend(r);
                failures.extend(f);
            }
            Err(e) => failures.push(fail(trial, "trial", e)),
        }
    }
    let summary = Summary::from_rows(cfg.kind, cfg.trials, &rows, &failures);
    Ok(ExperimentOutput { rows, failures, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_merge_and_resolve() {
        let file = PartialConfig::from_toml("kind = \"clipping_demo\"\ntrials = 7\nof = 3.0\n").unwrap();
        let cli = PartialConfig {
            trials: Some(9),
            ..PartialConfig::default()
        };
        let cfg = ExperimentConfig::resolve(file.merge(cli)).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::ClippingDemo);
        assert_eq!(cfg.trials, 9);
        assert_eq!(cfg.n, 10_000);
        assert_eq!(cfg.overestimation_factor, 3.0);
        assert!(PartialConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::resolve(PartialConfig {
            trials: Some(0),
            ..PartialConfig::default()
        })
        .is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ResultRow::new(0, 1, 1.0, 1.1, Some((0.5, 1.5)), "gvdp"),
            ResultRow::new(3, 0, -2.0, 0.1 + 0.2, None, "adassp@1000"),
        ];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("trial,dim,true,estimate,ci_lo,ci_hi,covered,method\n"));
        let back = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].estimate.to_bits(), rows[1].estimate.to_bits());
        assert!(back[1].ci_lo.is_nan() && !back[1].covered);
    }

    #[test]
    fn small_clipping_run_is_deterministic() {
        let cfg = ExperimentConfig {
            n: 500,
            trials: 4,
            ..ExperimentConfig::defaults(ExperimentKind::ClippingDemo)
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_rows(&mut x, &a.rows).unwrap();
        write_rows(&mut y, &b.rows).unwrap();
        assert_eq!(x, y);
        assert_eq!(a.rows.len(), 4 * 4);
        assert!(a.failures.is_empty());
        for r in &a.rows {
            assert_eq!(r.covered, r.ci_lo <= r.truth && r.truth <= r.ci_hi);
        }
    }

    #[test]
    fn small_coverage_run() {
        let cfg = ExperimentConfig {
            n: 4000,
            k: 40,
            r: 10,
            trials: 2,
            hpub_draws: 20_000,
            ..ExperimentConfig::defaults(ExperimentKind::OlsCoverage)
        };
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        let g = out.summary.method("gvdp").unwrap();
        assert_eq!(g.estimates, 2 * cfg.d);
        assert!(out.summary.to_string().contains("gvdp"));
    }
}
