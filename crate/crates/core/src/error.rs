use thiserror::Error;

/// Errors raised by the estimation and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HopError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rate truncation cannot reach tolerance {tolerance:e} at site {site} (bound {bound:e})")]
    Truncation { site: i64, tolerance: f64, bound: f64 },

    #[error("environment window does not cover [{lo}, {hi}]")]
    WindowNotCovered { lo: f64, hi: f64 },

    #[error("thinning at cutoff {cutoff} leaves no point on the {side} side of the origin")]
    EmptyThinning { cutoff: f64, side: &'static str },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("exhaustive search limited to {max} points, got {got}")]
    TooManyPoints { max: usize, got: usize },

    #[error("conductance graph is disconnected")]
    Disconnected,

    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { method: &'static str, iterations: usize, residual: f64 },

    #[error("expectation diverges: {0}")]
    Divergent(String),

    #[error("environment cannot be extended: {0}")]
    NotExtendable(String),

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, HopError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(HopError::InvalidParameter(msg.into()))
}
