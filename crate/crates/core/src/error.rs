use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A non-finite value appeared. `step` is the inner step (or solver step)
    /// where it was first observed and `norm` the offending iterate norm.
    #[error("divergence at step {step}: {what} (norm = {norm:e})")]
    Divergence {
        step: usize,
        norm: f64,
        what: String,
    },

    #[error("{0} is not available for this problem (black-box only)")]
    NotDifferentiable(&'static str),

    #[error("dense oracle too large: M*N = {size} exceeds cap {cap}")]
    OracleTooLarge { size: usize, cap: usize },

    #[error("trajectory replay mismatch at step {step}")]
    ReplayMismatch { step: usize },

    #[error(
        "Neumann iteration diverged at term {term} (|r_k| / |r_0| = {growth:e}); reduce alpha"
    )]
    NeumannDivergence { term: usize, growth: f64 },

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn divergence(step: usize, norm: f64, what: impl Into<String>) -> Self {
        Error::Divergence {
            step,
            norm,
            what: what.into(),
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NeumannDivergence { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
