use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("hessian is indefinite (smallest eigenvalue {0:e})")]
    IndefiniteHessian(f64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("safe-start violation: min h = {min_h:e} at the initial state")]
    UnsafeStart { min_h: f64 },

    #[error("filter QP infeasible at t = {time}")]
    FilterInfeasible { time: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
