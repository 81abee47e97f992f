use thiserror::Error;

/// Errors produced by the model, rate, and solver layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("user index {index} out of range (K = {count})")]
    UserIndex { index: usize, count: usize },

    #[error("deterministic-equivalent fixed point for user {user} did not converge after {iterations} iterations (last change {last_change:e})")]
    FixedPointDiverged {
        user: usize,
        iterations: usize,
        last_change: f64,
    },

    #[error("deterministic-equivalent state for user {0} is not converged")]
    NotConverged(usize),

    #[error("water-filling could not bracket total power {target:e} W")]
    Bracket { target: f64 },

    #[error("instance too large for grid oracle: K*M = {dims} exceeds {cap}")]
    GridCap { dims: usize, cap: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
