//! Exit codes: 0 ok, 1 unexpected, 2 usage/config, 3 sampling did not
//! converge, 4 input integrity, 5 infeasible fit.

use std::fmt;

use crate::config::ConfigError;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const USAGE: u8 = 2;
pub const NOT_CONVERGED: u8 = 3;
pub const INTEGRITY: u8 = 4;
pub const INFEASIBLE_FIT: u8 = 5;

/// A stage outcome that must surface as a specific exit code even though
/// its outputs were written.
#[derive(Debug)]
pub struct StageFailure {
    pub code: u8,
    pub message: String,
}

impl StageFailure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for StageFailure {}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(s) = cause.downcast_ref::<StageFailure>() {
            return s.code;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<barrier_synth::Error>() {
            use barrier_synth::Error as E;
            return match e {
                E::Integrity(_) | E::Format(_) | E::Json(_) | E::Io(_) => INTEGRITY,
                E::InvalidParameter(_) | E::DimensionMismatch { .. } | E::UnknownSystem(_) => USAGE,
                _ => INTERNAL,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return INTEGRITY;
        }
    }
    INTERNAL
}
