use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    #[error("invalid privacy budget: rho = {0} (must be finite and nonnegative)")]
    InvalidBudget(f64),

    /// The Gaussian mechanism was asked to run with a zero budget.
    #[error("refusing to privatize with rho = 0 (noise would be infinite)")]
    ZeroBudget,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("fit did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    #[error("replicate fit failed on subset {subset}: {source}")]
    Replicate {
        subset: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
