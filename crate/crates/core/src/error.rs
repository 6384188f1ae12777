use thiserror::Error;

use crate::coincidence::CandidateCurve;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("insufficient numerical accuracy: {0}")]
    Accuracy(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("degenerate normalization: {0}")]
    DegenerateNormalization(String),

    #[error("no noise-boundary candidate produced a plateau ({} candidates tried)", .diagnostics.len())]
    NoPlateau { diagnostics: Vec<CandidateCurve> },

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("bootstrap failed: {failed} of {total} resample fits did not converge")]
    BootstrapFailure { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
