use thiserror::Error;

use crate::params::ParamError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Param(#[from] ParamError),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("not converged at dimension {dimension}: last relative change {last_delta:e}")]
    Convergence { dimension: usize, last_delta: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("insufficient data: {usable} usable points ({excluded} excluded), need {required}")]
    InsufficientData {
        usable: usize,
        excluded: usize,
        required: usize,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) | Error::Validation(_) => "validation",
            Error::Contract(_) => "contract",
            Error::Convergence { .. } => "convergence",
            Error::Domain(_) => "domain",
            Error::NotImplemented(_) => "not_implemented",
            Error::InsufficientData { .. } => "insufficient_data",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
