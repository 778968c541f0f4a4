//! Synthetic multichannel mixtures, a Gaussian-prior benchmark, and SI-SDR.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::fcp::{apply_filter, MultiFrameFilter};
use crate::linalg;
use crate::noise_model::NoiseScmField;
use crate::spectral::{decompress, ComplexSpectrogram, Domain, StftParams};

/// Decay of the synthetic filter taps per frame of lag.
pub const TAP_DECAY: f64 = 0.6;

/// Magnitude bound reported by [`si_sdr`].
pub const SI_SDR_CAP_DB: f64 = 120.0;

const STREAM_FILTER: u64 = 1;
const STREAM_SCM: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_DISTORTION: u64 = 4;
const STREAM_SOURCE: u64 = 5;
const TEMPLATE_SEED_OFFSET: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    /// Independent unit-power noise on every channel.
    White,
    /// A random full-rank spatial covariance per bin, constant over time.
    Diffuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub channels: usize,
    pub n_taps: usize,
    pub noise: NoiseKind,
    /// Reference-channel SNR in dB; `+inf` gives a noiseless mixture.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            n_taps: 3,
            noise: NoiseKind::Diffuse,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mixture {
    /// `Y = image + n_true`.
    pub y: ComplexSpectrogram,
    /// Filtered source `h_true ⊛ X`.
    pub image: ComplexSpectrogram,
    pub h_true: MultiFrameFilter,
    pub n_true: ComplexSpectrogram,
    /// Covariance the noise was drawn from.
    pub phi_true: NoiseScmField,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Unit-power circular complex Gaussian.
fn cn(rng: &mut ChaCha8Rng) -> Complex64 {
    let d = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    Complex64::new(d.sample(rng), d.sample(rng))
}

fn random_filter(
    taps: usize,
    bins: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> MultiFrameFilter {
    let mut h = Array3::zeros((taps, bins, channels));
    for n in 0..taps {
        let g = TAP_DECAY.powi(n as i32);
        for k in 0..bins {
            for c in 0..channels {
                h[[n, k, c]] = cn(rng) * g;
            }
        }
    }
    MultiFrameFilter::new(h).expect("finite taps")
}

/// Per-bin `K × C × C` covariances with unit mean channel power.
fn spatial_covariance(
    kind: NoiseKind,
    bins: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<Complex64> {
    let mut out = Array3::zeros((bins, c, c));
    for k in 0..bins {
        match kind {
            NoiseKind::White => {
                for i in 0..c {
                    out[[k, i, i]] = Complex64::new(1.0, 0.0);
                }
            }
            NoiseKind::Diffuse => {
                let b: Vec<Complex64> = (0..c * c).map(|_| cn(rng)).collect();
                let mut m = vec![Complex64::new(0.0, 0.0); c * c];
                for i in 0..c {
                    for j in 0..c {
                        m[i * c + j] = (0..c).map(|r| b[i * c + r] * b[j * c + r].conj()).sum();
                    }
                    m[i * c + i] += Complex64::new(1e-3 * c as f64, 0.0);
                }
                let scale = c as f64 / linalg::trace_re(&m, c);
                for i in 0..c {
                    for j in 0..c {
                        out[[k, i, j]] = m[i * c + j] * scale;
                    }
                }
            }
        }
    }
    out
}

/// Filters a single-channel STFT source to `spec.channels` microphones and
/// adds spatially coloured noise at the requested reference-channel SNR.
///
/// The SNR holds exactly in the STFT domain: the drawn noise is rescaled so
/// that `‖image₀‖² / ‖n₀‖²` equals `10^(snr/10)`, and `phi_true` carries the
/// same scale.
pub fn gen_mixture(x_clean: &ComplexSpectrogram, spec: &MixtureSpec) -> Result<Mixture> {
    x_clean.ensure_single_channel("clean source")?;
    x_clean.ensure_domain(Domain::Stft)?;
    if spec.channels == 0 || spec.n_taps == 0 {
        return Err(invalid_config(
            "mixture needs at least one channel and one tap",
        ));
    }
    if spec.snr_db.is_nan() || spec.snr_db == f64::NEG_INFINITY {
        return Err(invalid_config(format!("unusable SNR {}", spec.snr_db)));
    }
    let (frames, bins, _) = x_clean.shape();
    let c = spec.channels;

    let h = random_filter(spec.n_taps, bins, c, &mut rng_for(spec.seed, STREAM_FILTER));
    let image = apply_filter(&h, x_clean)?;
    let cov = spatial_covariance(spec.noise, bins, c, &mut rng_for(spec.seed, STREAM_SCM));

    if spec.snr_db == f64::INFINITY {
        let n_true = ComplexSpectrogram::from_parts(Array3::zeros((frames, bins, c)), &image);
        let phi_true = NoiseScmField::time_invariant(&Array3::zeros((bins, c, c)), frames)?;
        return Ok(Mixture {
            y: image.clone(),
            image,
            h_true: h,
            n_true,
            phi_true,
        });
    }

    let mut chol = cov.clone();
    for k in 0..bins {
        let block = chol.index_axis_mut(ndarray::Axis(0), k);
        let slice = block.into_slice().expect("standard layout");
        if !linalg::cholesky_in_place(slice, c) {
            return Err(invalid_input("spatial covariance is not positive definite"));
        }
    }
    let mut rng = rng_for(spec.seed, STREAM_NOISE);
    let mut noise = Array3::<Complex64>::zeros((frames, bins, c));
    let mut z = vec![Complex64::new(0.0, 0.0); c];
    for l in 0..frames {
        for k in 0..bins {
            z.iter_mut().for_each(|v| *v = cn(&mut rng));
            for i in 0..c {
                noise[[l, k, i]] = (0..=i).map(|j| chol[[k, i, j]] * z[j]).sum();
            }
        }
    }

    let p_image: f64 = image
        .data()
        .index_axis(ndarray::Axis(2), 0)
        .iter()
        .map(|v| v.norm_sqr())
        .sum();
    let p_noise: f64 = noise
        .index_axis(ndarray::Axis(2), 0)
        .iter()
        .map(|v| v.norm_sqr())
        .sum();
    if !(p_image > 0.0) {
        return Err(invalid_input("cannot set an SNR for a silent source"));
    }
    let gain2 = p_image / (p_noise * 10f64.powf(spec.snr_db / 10.0));
    let gain = gain2.sqrt();
    noise.mapv_inplace(|v| v * gain);
    let n_true = ComplexSpectrogram::from_parts(noise, &image);
    let phi_true = NoiseScmField::time_invariant(&cov.mapv(|v| v * gain2), frames)?;
    let y = image.add_scaled(1.0, &n_true)?;
    Ok(Mixture {
        y,
        image,
        h_true: h,
        n_true,
        phi_true,
    })
}

/// Draws `x₀' = μ + √s² · w` with `w ~ CN(0, 2I)` in the compressive domain.
/// Uses its own generator stream, independent of any `NoiseSource` with the same seed.
pub fn sample_gaussian_prior(
    mu: &ComplexSpectrogram,
    s2: &Array2<f64>,
    seed: u64,
) -> Result<ComplexSpectrogram> {
    mu.ensure_single_channel("prior mean")?;
    let (frames, bins, _) = mu.shape();
    if s2.dim() != (frames, bins) {
        return Err(invalid_input(format!(
            "variance is {:?}, mean is {frames}x{bins}",
            s2.dim()
        )));
    }
    let mut rng = rng_for(seed, STREAM_SOURCE);
    let mut out = mu.data().clone();
    for ((l, k, _), o) in out.indexed_iter_mut() {
        let w = cn(&mut rng) * std::f64::consts::SQRT_2;
        *o += w * s2[[l, k]].sqrt();
    }
    Ok(ComplexSpectrogram::from_parts(out, mu).with_domain(Domain::Compressive))
}

/// Adds a randomly filtered white distortion so that `‖x‖² / ‖d‖²` equals
/// `10^(sdr_db/10)`.
pub fn distort(
    x: &ComplexSpectrogram,
    sdr_db: f64,
    n_taps: usize,
    seed: u64,
) -> Result<ComplexSpectrogram> {
    x.ensure_single_channel("distortion target")?;
    if !sdr_db.is_finite() || n_taps == 0 {
        return Err(invalid_config(
            "distortion needs a finite SDR and at least one tap",
        ));
    }
    let (frames, bins, _) = x.shape();
    let mut rng = rng_for(seed, STREAM_DISTORTION);
    let h = random_filter(n_taps, bins, 1, &mut rng);
    let white = Array3::from_shape_simple_fn((frames, bins, 1), || cn(&mut rng));
    let d = apply_filter(&h, &ComplexSpectrogram::from_parts(white, x))?;
    let px = x.norm().powi(2);
    let pd = d.norm().powi(2);
    if !(px > 0.0) {
        return Err(invalid_input(
            "cannot distort a silent signal to a finite SDR",
        ));
    }
    let gain = (px / (pd * 10f64.powf(sdr_db / 10.0))).sqrt();
    x.add_scaled(gain, &d)
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `±SI_SDR_CAP_DB`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(invalid_input(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if !(rr > 0.0) {
        return Err(invalid_input("reference signal is silent"));
    }
    let er: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let a = er / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let t = a * r;
        target += t * t;
        resid += (e - t) * (e - t);
    }
    let db = if resid == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Synthetic refinement problem whose clean source follows a known
/// compressive-domain Gaussian prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub samples: usize,
    pub stft: StftParams,
    pub mixture: MixtureSpec,
    /// Per-component variance of the random template used as the prior mean;
    /// zero gives a zero-mean prior.
    pub template_variance: f64,
    /// Per-component prior variance of the compressed source around the template.
    pub prior_variance: f64,
    /// SDR of the initial estimate against the clean source.
    pub estimate_sdr_db: f64,
    pub estimate_taps: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            samples: 64_000,
            stft: StftParams::default(),
            mixture: MixtureSpec::default(),
            template_variance: 0.0,
            prior_variance: 1.0,
            estimate_sdr_db: 10.0,
            estimate_taps: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub clean: ComplexSpectrogram,
    pub estimate: ComplexSpectrogram,
    pub mixture: Mixture,
    pub prior_mean: ComplexSpectrogram,
    pub prior_variance: Array2<f64>,
}

pub fn synthetic_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.stft.validate()?;
    let frames = spec.stft.n_frames(spec.samples);
    let bins = spec.stft.n_bins();
    let zero = ComplexSpectrogram::zeros(frames, bins, 1, Domain::Compressive)
        .with_params(spec.stft)
        .with_signal_len(spec.samples);
    let template = Array2::from_elem((frames, bins), spec.template_variance);
    let prior_mean = sample_gaussian_prior(
        &zero,
        &template,
        spec.seed.wrapping_add(TEMPLATE_SEED_OFFSET),
    )?;
    let prior_variance = Array2::from_elem((frames, bins), spec.prior_variance);
    let sample = sample_gaussian_prior(&prior_mean, &prior_variance, spec.seed)?;
    let clean = decompress(&sample)?;
    let estimate = distort(&clean, spec.estimate_sdr_db, spec.estimate_taps, spec.seed)?;
    let mixture = gen_mixture(
        &clean,
        &MixtureSpec {
            seed: spec.seed,
            ..spec.mixture
        },
    )?;
    Ok(Benchmark {
        clean,
        estimate,
        mixture,
        prior_mean,
        prior_variance,
    })
}
