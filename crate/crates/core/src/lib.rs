//! Differentially private parameter estimation with valid confidence intervals.
//!
//! The pipeline runs an arbitrary estimator under the bag of little bootstraps
//! over a disjoint partition of the data, privately estimates the mean and
//! covariance of the induced replicate distribution with a generalized
//! CoinPress ball-shrinking estimator, combines the per-step estimates by
//! precision weighting, and turns the result into confidence intervals.
//!
//! Modules, bottom-up:
//!
//!  - [`privacy`]: zCDP budgets, sensitivity, and the Gaussian mechanism.
//!  - [`tail_bounds`]: norm-quantile bounds for the clipping radii and the
//!    Monte-Carlo upper-bound machinery (HPUB / ApproxUB, Clopper–Pearson).
//!  - [`blb`]: partitioning, multinomial resampling weights, replicate fits.
//!  - [`estimators`]: weighted OLS, weighted logistic regression, and a few
//!    trivial estimators used in tests.
//!  - [`coinpress`]: one-step ball improvement and the t-step recursion.
//!  - [`aggregation`]: precision weighting, covariance upper bounds, PSD projection.
//!  - [`inference`]: orchestration and confidence intervals.

pub mod aggregation;
pub mod blb;
pub mod coinpress;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod privacy;
pub mod special;
pub mod stream;
pub mod tail_bounds;

pub use error::{Error, Result};
