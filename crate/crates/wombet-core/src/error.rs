//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an API contract (shape mismatch, stale tape,
    /// invalid precondition). These indicate programmer error, not bad data.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An environment produced a non-finite state; the episode is aborted.
    #[error("environment fault: {0}")]
    EnvironmentFault(String),

    /// Every CEM candidate evaluated to the rejection sentinel.
    #[error("planner failure: all candidate sequences rejected")]
    PlannerFailure,

    /// A training update produced a non-finite loss.
    #[error("divergence in {context}: loss = {loss}")]
    Divergence { context: String, loss: f64 },

    /// Dataset / checkpoint file could not be parsed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// File carries a version tag this build does not understand.
    #[error("unsupported version: expected {expected:?}, found {found:?}")]
    UnsupportedVersion { expected: String, found: String },

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
