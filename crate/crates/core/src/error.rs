use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("covariance matrix not positive definite after jitter up to {max_jitter:e}")]
    SingularCovariance { max_jitter: f64 },

    #[error("mode search did not converge after {iterations} iterations")]
    ModeNotConverged {
        iterations: usize,
        last_iterate: Vec<f64>,
        objective_trace: Vec<f64>,
    },

    #[error("degenerate curvature estimate ({0}): no residual inside the bandwidth")]
    DegenerateCurvature(f64),

    #[error("nonpositive density {0} at the quantile")]
    NonPositiveDensity(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("non-finite objective: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
