use thiserror::Error;

use crate::spectral::Domain;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("domain mismatch: expected {expected:?} spectrogram, got {found:?}")]
    DomainMismatch { expected: Domain, found: Domain },

    #[error("non-finite value encountered at diffusion step {step}")]
    NonFinite { step: usize },

    #[error("external denoiser: {0}")]
    External(String),

    #[error("denoiser protocol violation at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
