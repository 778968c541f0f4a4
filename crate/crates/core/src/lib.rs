//! Diffusion posterior sampling refinement for multi-channel speech enhancement.
//!
//! Takes a multi-channel noisy mixture and the single-channel output of any
//! discriminative enhancement model, estimates the noise spatial covariance
//! from that output, and runs a guided DDPM reverse chain over the
//! compressive STFT of the speech estimate. The likelihood guidance uses a
//! per-step multi-frame transfer function estimate (forward convolutive
//! prediction) and the fixed noise covariance.
//!
//! Module map:
//!
//! - [`spectral`]: STFT/iSTFT and the compressive-domain mappings.
//! - [`fcp`]: weighted least-squares multi-frame filter estimation.
//! - [`noise_model`]: noise estimate, spatial covariance EMA, MCWF baseline.
//! - [`diffusion`]: schedule, DDPM kernels, denoiser interface.
//! - [`external`]: wire protocol adapter for out-of-process denoisers.
//! - [`guidance`]: log-likelihood and its gradient.
//! - [`sampler`]: the end-to-end refinement loop.
//! - [`simulate`]: synthetic mixtures and SI-SDR.
//! - [`cli`]: command-line workflows and WAV I/O.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod external;
pub mod fcp;
pub mod guidance;
pub(crate) mod linalg;
pub mod noise_model;
pub mod sampler;
pub mod simulate;
pub mod spectral;

pub use diffusion::{Denoiser, DiffusionSchedule, GaussianDenoiser, NoiseCoef, ZeroDenoiser};
pub use error::{Error, Result};
pub use fcp::{FcpParams, MultiFrameFilter};
pub use guidance::JacobianPolicy;
pub use noise_model::NoiseScmField;
pub use sampler::{refine, refine_trace, RefineConfig, TraceRecord};
pub use spectral::{ComplexSpectrogram, Domain, StftParams};
