//! DDPM schedule and kernels over compressive spectrograms, plus the
//! denoiser interface and its in-process implementations.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `ᾱ₀ := 1` so that `σ₁² = 0`.
//! Complex Gaussian draws have independent unit-variance real and imaginary
//! parts, and all formulas act componentwise on `(re, im)`.

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::spectral::{ComplexSpectrogram, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl Default for DiffusionSchedule {
    /// Linear `β` from `1e-4` to `0.02` over 1000 steps.
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    /// `β_t = β₁ + (t−1)(β_T − β₁)/(T−1)`; the endpoints are stored exactly.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid_config(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(invalid_config(format!(
                "need 0 < beta_1 < beta_T < 1, got {beta_1}, {beta_t}"
            )));
        }
        let span = (steps - 1) as f64;
        let mut beta: Vec<f64> = (0..steps)
            .map(|i| beta_1 + i as f64 * (beta_t - beta_1) / span)
            .collect();
        beta[0] = beta_1;
        beta[steps - 1] = beta_t;
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sigma2,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid_input(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }
}

/// Coefficient on the fresh noise in the reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseCoef {
    /// `σ_t² · z`.
    #[default]
    Sigma2,
    /// `σ_t · z`, the standard DDPM ancestral step.
    Sigma,
}

impl NoiseCoef {
    pub fn coefficient(self, sched: &DiffusionSchedule, t: usize) -> f64 {
        match self {
            NoiseCoef::Sigma2 => sched.sigma2(t),
            NoiseCoef::Sigma => sched.sigma2(t).sqrt(),
        }
    }
}

/// Counter-based Gaussian source: the draw for `(seed, stream, index)` is
/// fixed regardless of what else was drawn.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// `CN(0, 2I)` spectrogram for the given stream, drawn frame-major.
    pub fn draw(&self, stream: u64, shape: (usize, usize, usize)) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let data = Array3::from_shape_simple_fn(shape, || {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im)
        });
        ComplexSpectrogram::from_array(data, Domain::Compressive)
    }
}

/// `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(
    x0: &ComplexSpectrogram,
    t: usize,
    noise: &ComplexSpectrogram,
    sched: &DiffusionSchedule,
) -> Result<ComplexSpectrogram> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt()).add_scaled((1.0 - ab).sqrt(), noise)
}

/// One-step denoised estimate `x̂₀ = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn tweedie_denoise(
    x_t: &ComplexSpectrogram,
    eps_hat: &ComplexSpectrogram,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<ComplexSpectrogram> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    Ok(x_t
        .add_scaled(-(1.0 - ab).sqrt(), eps_hat)?
        .scale(1.0 / ab.sqrt()))
}

/// Prior reverse step
/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε̂)/√α_t + coef · z`.
pub fn reverse_step(
    x_t: &ComplexSpectrogram,
    eps_hat: &ComplexSpectrogram,
    t: usize,
    z: &ComplexSpectrogram,
    sched: &DiffusionSchedule,
    noise_coef: NoiseCoef,
) -> Result<ComplexSpectrogram> {
    sched.check_step(t)?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let mean = x_t
        .add_scaled(-(1.0 - a) / (1.0 - ab).sqrt(), eps_hat)?
        .scale(1.0 / a.sqrt());
    mean.add_scaled(noise_coef.coefficient(sched, t), z)
}

/// Noise-prediction model `ε_θ(x_t, t)` over compressive spectrograms.
pub trait Denoiser {
    fn predict_noise(&mut self, x_t: &ComplexSpectrogram, t: usize) -> Result<ComplexSpectrogram>;

    /// Whether [`Denoiser::vjp`] is exact.
    fn has_exact_vjp(&self) -> bool {
        false
    }

    /// `(∂ε̂/∂x_t)ᵀ · cotangent` on `(re, im)` pairs.
    fn vjp(
        &mut self,
        _x_t: &ComplexSpectrogram,
        _t: usize,
        _cotangent: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        Err(Error::External("this denoiser exposes no Jacobian".into()))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_noise(&mut self, x_t: &ComplexSpectrogram, t: usize) -> Result<ComplexSpectrogram> {
        (**self).predict_noise(x_t, t)
    }

    fn has_exact_vjp(&self) -> bool {
        (**self).has_exact_vjp()
    }

    fn vjp(
        &mut self,
        x_t: &ComplexSpectrogram,
        t: usize,
        cotangent: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        (**self).vjp(x_t, t, cotangent)
    }
}

/// Always predicts zero noise; its Jacobian is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&mut self, x_t: &ComplexSpectrogram, _t: usize) -> Result<ComplexSpectrogram> {
        Ok(x_t.scale(0.0))
    }

    fn has_exact_vjp(&self) -> bool {
        true
    }

    fn vjp(
        &mut self,
        _x_t: &ComplexSpectrogram,
        _t: usize,
        cotangent: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        Ok(cotangent.scale(0.0))
    }
}

/// Exact noise predictor for an independent Gaussian prior
/// `x₀ ~ N(μ, s²)` on every real component.
///
/// `E[x₀|x_t] = (s²√ᾱ x_t + (1−ᾱ) μ) / (ᾱ s² + 1 − ᾱ)` and
/// `ε̂ = (x_t − √ᾱ E[x₀|x_t]) / √(1−ᾱ)`, so the Jacobian is the scalar
/// `√(1−ᾱ) / (ᾱ s² + 1 − ᾱ)` per component.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    mu: ComplexSpectrogram,
    s2: Array2<f64>,
    sched: DiffusionSchedule,
}

impl GaussianDenoiser {
    /// `mu` is single-channel compressive `L × K × 1`; `s2` is `L × K`.
    pub fn new(mu: ComplexSpectrogram, s2: Array2<f64>, sched: DiffusionSchedule) -> Result<Self> {
        mu.ensure_single_channel("prior mean")?;
        if s2.dim() != (mu.n_frames(), mu.n_bins()) {
            return Err(invalid_input(format!(
                "prior variance is {:?}, mean is {}x{}",
                s2.dim(),
                mu.n_frames(),
                mu.n_bins()
            )));
        }
        if !s2.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(invalid_input("prior variance must be positive and finite"));
        }
        Ok(Self {
            mu: mu.with_domain(Domain::Compressive),
            s2,
            sched,
        })
    }

    /// Same variance in every bin.
    pub fn isotropic(mu: ComplexSpectrogram, s2: f64, sched: DiffusionSchedule) -> Result<Self> {
        let var = Array2::from_elem((mu.n_frames(), mu.n_bins()), s2);
        Self::new(mu, var, sched)
    }

    pub fn mean(&self) -> &ComplexSpectrogram {
        &self.mu
    }

    pub fn variance(&self) -> &Array2<f64> {
        &self.s2
    }

    pub fn posterior_mean(&self, x_t: &ComplexSpectrogram, t: usize) -> Result<ComplexSpectrogram> {
        self.check(x_t, t)?;
        let ab = self.sched.alpha_bar(t);
        let mut out = x_t.data().clone();
        Zip::indexed(&mut out)
            .and(self.mu.data())
            .for_each(|(l, k, _), o, &mu| {
                let s2 = self.s2[[l, k]];
                *o = (*o * (s2 * ab.sqrt()) + mu * (1.0 - ab)) / (ab * s2 + 1.0 - ab);
            });
        Ok(ComplexSpectrogram::from_parts(out, x_t))
    }

    fn check(&self, x_t: &ComplexSpectrogram, t: usize) -> Result<()> {
        self.sched.check_step(t)?;
        self.mu.ensure_same_shape(x_t)
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&mut self, x_t: &ComplexSpectrogram, t: usize) -> Result<ComplexSpectrogram> {
        let mean = self.posterior_mean(x_t, t)?;
        let ab = self.sched.alpha_bar(t);
        Ok(x_t
            .add_scaled(-ab.sqrt(), &mean)?
            .scale(1.0 / (1.0 - ab).sqrt()))
    }

    fn has_exact_vjp(&self) -> bool {
        true
    }

    fn vjp(
        &mut self,
        x_t: &ComplexSpectrogram,
        t: usize,
        cotangent: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        self.check(x_t, t)?;
        self.mu.ensure_same_shape(cotangent)?;
        let ab = self.sched.alpha_bar(t);
        let mut out = cotangent.data().clone();
        Zip::indexed(&mut out).for_each(|(l, k, _), o| {
            let gain = (1.0 - ab).sqrt() / (ab * self.s2[[l, k]] + 1.0 - ab);
            *o *= gain;
        });
        Ok(ComplexSpectrogram::from_parts(out, cotangent))
    }
}

/// Unguided ancestral sampling from `x_T ~ CN(0, 2I)` down to `x₀`.
///
/// Stream `0` seeds the initial state and stream `t` the step-`t` noise.
pub fn sample_prior<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    sched: &DiffusionSchedule,
    shape: (usize, usize, usize),
    noise_coef: NoiseCoef,
    noise: NoiseSource,
) -> Result<ComplexSpectrogram> {
    let mut x = noise.draw(0, shape);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = denoiser.predict_noise(&x, t)?;
        let z = noise.draw(t as u64, shape);
        x = reverse_step(&x, &eps_hat, t, &z, sched, noise_coef)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
    }
    Ok(x)
}
