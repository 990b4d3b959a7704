use thiserror::Error;

use crate::distributions::DistError;

/// A user-supplied setting is invalid.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError(message.into())
    }
}

#[derive(Debug, Error)]
pub enum SdviError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Distribution(#[from] DistError),
    #[error("discovery failed: none of {0} prior simulations had finite density")]
    DiscoveryFailed(usize),
    #[error("inference failed: every local ELBO estimate is -inf")]
    AllElbosInfinite,
    #[error("SLP {slp}: no guide proposal accepted in {attempts} attempts")]
    RejectionExhausted { slp: usize, attempts: usize },
    #[error("SLP {slp}: {reason}")]
    Slp { slp: usize, reason: String },
}

pub type Result<T, E = SdviError> = std::result::Result<T, E>;
