use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("distribution has empty support")]
    EmptySupport,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("did not converge after {iterations} sweeps (last sup-norm change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("recursion budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("ensemble has no trained elites")]
    UntrainedEnsemble,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, value: f64, reason: &'static str) -> Error {
    Error::InvalidParameter {
        name,
        value,
        reason,
    }
}
