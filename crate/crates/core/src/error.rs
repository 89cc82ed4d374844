use std::io;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed malformed input (shapes, empty batches, bad distributions).
    #[error("input error: {0}")]
    Input(String),

    /// An experiment, generator or training configuration is infeasible.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("tracker error{}: {message}", sample.map(|id| format!(" for sample {id}")).unwrap_or_default())]
    Tracker {
        sample: Option<usize>,
        message: String,
    },

    #[error("acquisition error: {0}")]
    Acquisition(String),

    /// Broken internal invariant, e.g. gradient and parameter shapes disagree.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
