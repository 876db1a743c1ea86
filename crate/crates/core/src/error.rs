use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("eigendecomposition did not converge after {iterations} sweeps")]
    NoConvergence { iterations: usize },

    #[error("matrix is not positive semidefinite (last jitter tried {last_jitter:e} after {attempts} attempts)")]
    NotPositiveSemidefinite { attempts: usize, last_jitter: f64 },

    #[error("generation failed for kernel {kernel}: {reason}")]
    GenerationFailure { kernel: String, reason: String },

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("rank deficient: λ_{m} = {lambda_m:e} is below 1e-12·λ_1 = {threshold:e}")]
    RankDeficient { m: usize, lambda_m: f64, threshold: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFailure(msg.into())
    }

    /// True for failures caused by floating-point breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFailure(_)
                | Error::NoConvergence { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::GenerationFailure { .. }
                | Error::TrainingFailure(_)
                | Error::RankDeficient { .. }
        )
    }
}
