//! Warm-started, likelihood-guided reverse diffusion.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_diffuse, reverse_step, Denoiser, DiffusionSchedule, NoiseCoef, NoiseSource,
};
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::fcp::{align, FcpParams};
use crate::guidance::{apply_guidance, check_precision, score_with_eps, JacobianPolicy};
use crate::noise_model::{estimate_noise, estimate_scm, invert_scm, NoiseScmField, INVERSE_LOAD};
use crate::spectral::{compress, decompress, ComplexSpectrogram, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Start step `T′`; the sampler runs `T′` reverse steps.
    pub t_start: usize,
    /// Guidance scale `ξ`.
    pub xi: f64,
    /// EMA smoothing of the noise SCM.
    pub scm_alpha: f64,
    pub fcp: FcpParams,
    /// Weight floor of the final single-tap alignment.
    pub align_eps: f64,
    pub seed: u64,
    /// `None` picks [`JacobianPolicy::default_for`] the denoiser.
    pub jacobian: Option<JacobianPolicy>,
    pub noise_coef: NoiseCoef,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            t_start: 300,
            xi: 0.4,
            scm_alpha: 0.95,
            fcp: FcpParams::default(),
            align_eps: 1e-3,
            seed: 0,
            jacobian: None,
            noise_coef: NoiseCoef::Sigma2,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.t_start < 1 || self.t_start > sched.steps() {
            return Err(invalid_config(format!(
                "start step must lie in [1, {}], got {}",
                sched.steps(),
                self.t_start
            )));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(invalid_config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.xi
            )));
        }
        if !(0.0..1.0).contains(&self.scm_alpha) {
            return Err(invalid_config(format!(
                "SCM smoothing must lie in [0, 1), got {}",
                self.scm_alpha
            )));
        }
        if !(self.align_eps > 0.0) {
            return Err(invalid_config(format!(
                "alignment floor must be > 0, got {}",
                self.align_eps
            )));
        }
        self.fcp.validate()
    }
}

/// Per-step diagnostics, one record per reverse step `t = T′, …, 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub state_norm: f64,
}

/// `Φ̂⁻¹` from the residual of the speech estimate, fixed for the whole run.
pub fn noise_precision(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    fcp: FcpParams,
    scm_alpha: f64,
) -> Result<NoiseScmField> {
    let n = estimate_noise(y, x_tilde, fcp)?;
    invert_scm(&estimate_scm(&n, scm_alpha)?, INVERSE_LOAD)
}

/// Refines `x_tilde` (single-channel STFT) given the mixture `y` and the
/// noise precision field. Returns the aligned STFT-domain estimate.
pub fn refine<D: Denoiser + ?Sized>(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
    denoiser: &mut D,
    config: &RefineConfig,
    sched: &DiffusionSchedule,
) -> Result<ComplexSpectrogram> {
    run(y, x_tilde, phi_inv, denoiser, config, sched, None)
}

/// [`refine`] that also returns one [`TraceRecord`] per step.
pub fn refine_trace<D: Denoiser + ?Sized>(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
    denoiser: &mut D,
    config: &RefineConfig,
    sched: &DiffusionSchedule,
) -> Result<(ComplexSpectrogram, Vec<TraceRecord>)> {
    let mut trace = Vec::with_capacity(config.t_start);
    let out = run(
        y,
        x_tilde,
        phi_inv,
        denoiser,
        config,
        sched,
        Some(&mut trace),
    )?;
    Ok((out, trace))
}

fn run<D: Denoiser + ?Sized>(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
    denoiser: &mut D,
    config: &RefineConfig,
    sched: &DiffusionSchedule,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<ComplexSpectrogram> {
    config.validate(sched)?;
    x_tilde.ensure_single_channel("speech estimate")?;
    x_tilde.ensure_domain(Domain::Stft)?;
    y.ensure_domain(Domain::Stft)?;
    if (y.n_frames(), y.n_bins()) != (x_tilde.n_frames(), x_tilde.n_bins()) {
        return Err(invalid_input(format!(
            "mixture is {}x{} but speech estimate is {}x{}",
            y.n_frames(),
            y.n_bins(),
            x_tilde.n_frames(),
            x_tilde.n_bins()
        )));
    }
    check_precision(y, phi_inv)?;
    let policy = config
        .jacobian
        .unwrap_or_else(|| JacobianPolicy::default_for(denoiser));

    let shape = x_tilde.shape();
    let noise = NoiseSource::new(config.seed);
    let start = compress(x_tilde)?;
    let mut x = forward_diffuse(&start, config.t_start, &noise.draw(0, shape), sched)?;

    for t in (1..=config.t_start).rev() {
        let eps_hat = denoiser.predict_noise(&x, t)?;
        if eps_hat.shape() != shape {
            return Err(Error::External(format!(
                "denoiser returned shape {:?}, expected {shape:?}",
                eps_hat.shape()
            )));
        }
        if !eps_hat.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        let z = noise.draw(t as u64, shape);
        let prior = reverse_step(&x, &eps_hat, t, &z, sched, config.noise_coef)?;
        let score = score_with_eps(
            &x, &eps_hat, denoiser, y, phi_inv, config.fcp, t, sched, policy,
        )?;
        let next = apply_guidance(&prior, &score.grad, t, config.xi, sched)?;
        if let Some(records) = trace.as_deref_mut() {
            records.push(TraceRecord {
                t,
                log_likelihood: score.log_likelihood,
                grad_norm: score.grad.norm(),
                state_norm: x.norm(),
            });
        }
        if !next.is_finite() || !score.log_likelihood.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        x = next;
    }

    let x0 = decompress(&x)?;
    align(&x0, x_tilde, config.align_eps)
}
