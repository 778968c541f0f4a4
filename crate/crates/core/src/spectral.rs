//! STFT analysis/synthesis and the compressive-domain mappings.
//!
//! Spectrograms are stored frame-major as `L × K × C` arrays of
//! `Complex64`. Complex derivatives are handled on `(re, im)` pairs with the
//! ordinary real chain rule; the VJPs here are adjoints under the real inner
//! product `Re⟨u, v⟩`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array3, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};

/// Magnitude floor used by the compressive mappings.
pub const MAG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window: Window,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop_size: 128,
            window: Window::SqrtHann,
        }
    }
}

impl StftParams {
    pub fn new(fft_size: usize, hop_size: usize) -> Result<Self> {
        let params = Self {
            fft_size,
            hop_size,
            window: Window::SqrtHann,
        };
        params.validate()?;
        Ok(params)
    }

    /// The 256/64 configuration used by the MCWF baseline.
    pub fn mcwf() -> Self {
        Self {
            fft_size: 256,
            hop_size: 64,
            window: Window::SqrtHann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            return Err(invalid_config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop_size == 0 || !self.fft_size.is_multiple_of(self.hop_size) {
            return Err(invalid_config(format!(
                "fft_size {} must be divisible by hop_size {}",
                self.fft_size, self.hop_size
            )));
        }
        if self.hop_size > self.fft_size / 2 {
            return Err(invalid_config(format!(
                "hop_size {} exceeds fft_size/2 = {}",
                self.hop_size,
                self.fft_size / 2
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop_size)
    }

    /// Periodic square-root Hann window.
    pub fn window_coeffs(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        (0..self.fft_size)
            .map(|i| {
                (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                    .max(0.0)
                    .sqrt()
            })
            .collect()
    }
}

/// Whether a spectrogram holds raw STFT values or their compressed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Stft,
    Compressive,
}

/// Complex `L × K × C` spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array3<Complex64>,
    domain: Domain,
    params: Option<StftParams>,
    signal_len: Option<usize>,
}

impl ComplexSpectrogram {
    /// Wraps an `L × K × C` array. Fails on non-finite values or empty axes.
    pub fn new(data: Array3<Complex64>, domain: Domain) -> Result<Self> {
        let (l, k, c) = data.dim();
        if l == 0 || k == 0 || c == 0 {
            return Err(invalid_input(format!(
                "empty spectrogram shape {l}x{k}x{c}"
            )));
        }
        if !data.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(invalid_input("spectrogram contains non-finite values"));
        }
        Ok(Self {
            data,
            domain,
            params: None,
            signal_len: None,
        })
    }

    pub fn zeros(frames: usize, bins: usize, channels: usize, domain: Domain) -> Self {
        Self {
            data: Array3::zeros((frames, bins, channels)),
            domain,
            params: None,
            signal_len: None,
        }
    }

    pub(crate) fn from_array(data: Array3<Complex64>, domain: Domain) -> Self {
        Self {
            data,
            domain,
            params: None,
            signal_len: None,
        }
    }

    pub(crate) fn from_parts(data: Array3<Complex64>, like: &Self) -> Self {
        Self {
            data,
            domain: like.domain,
            params: like.params,
            signal_len: like.signal_len,
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_params(mut self, params: StftParams) -> Self {
        self.params = Some(params);
        self
    }

    pub fn with_signal_len(mut self, len: usize) -> Self {
        self.signal_len = Some(len);
        self
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn params(&self) -> Option<StftParams> {
        self.params
    }

    pub fn signal_len(&self) -> Option<usize> {
        self.signal_len
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().2
    }

    /// Single-channel view of channel `c`, copied.
    pub fn channel(&self, c: usize) -> Self {
        let data = self.data.slice(s![.., .., c..c + 1]).to_owned();
        Self::from_parts(data, self)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Euclidean norm over all `(re, im)` components.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Real inner product `Re Σ conj(a)·b`.
    pub fn dot_re(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self::from_parts(self.data.mapv(f), self)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor · other`, shapes must match.
    pub fn add_scaled(&self, factor: f64, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let mut data = self.data.clone();
        data.scaled_add(Complex64::new(factor, 0.0), &other.data);
        Ok(Self::from_parts(data, self))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid_input(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn ensure_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::DomainMismatch {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_single_channel(&self, what: &str) -> Result<()> {
        if self.n_channels() != 1 {
            return Err(invalid_input(format!(
                "{what} must be single-channel, got {} channels",
                self.n_channels()
            )));
        }
        Ok(())
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Centered one-sided STFT with a square-root Hann analysis window.
///
/// Each channel is zero-padded by `fft_size / 2` at both ends (plus whatever
/// is needed to complete the last frame), giving `1 + ceil(len / hop)` frames.
pub fn stft(wave: &[Vec<f64>], params: StftParams) -> Result<ComplexSpectrogram> {
    params.validate()?;
    let channels = wave.len();
    if channels == 0 {
        return Err(invalid_input("stft needs at least one channel"));
    }
    let len = wave[0].len();
    if len == 0 {
        return Err(invalid_input("stft needs at least one sample"));
    }
    if wave.iter().any(|ch| ch.len() != len) {
        return Err(invalid_input("all channels must have the same length"));
    }
    if wave.iter().flatten().any(|x| !x.is_finite()) {
        return Err(invalid_input("waveform contains non-finite samples"));
    }

    let n = params.fft_size;
    let hop = params.hop_size;
    let bins = params.n_bins();
    let frames = params.n_frames(len);
    let padded_len = (frames - 1) * hop + n;
    let window = params.window_coeffs();
    let fft = FftPair::new(n);

    let mut data = Array3::<Complex64>::zeros((frames, bins, channels));
    let mut padded = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (c, ch) in wave.iter().enumerate() {
        padded.iter_mut().for_each(|v| *v = 0.0);
        padded[n / 2..n / 2 + len].copy_from_slice(ch);
        for f in 0..frames {
            let start = f * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + i] * window[i], 0.0);
            }
            fft.forward.process(&mut buf);
            for k in 0..bins {
                data[[f, k, c]] = buf[k];
            }
        }
    }
    Ok(ComplexSpectrogram {
        data,
        domain: Domain::Stft,
        params: Some(params),
        signal_len: Some(len),
    })
}

/// Weighted overlap-add synthesis, the inverse of [`stft`].
///
/// Output length is the length recorded at analysis time, or
/// `(L - 1) · hop` if the spectrogram was not produced by [`stft`].
pub fn istft(spec: &ComplexSpectrogram, params: StftParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    spec.ensure_domain(Domain::Stft)?;
    let (frames, bins, channels) = spec.shape();
    if bins != params.n_bins() {
        return Err(invalid_input(format!(
            "spectrogram has {bins} bins but fft_size {} needs {}",
            params.fft_size,
            params.n_bins()
        )));
    }
    let n = params.fft_size;
    let hop = params.hop_size;
    let out_len = spec.signal_len.unwrap_or((frames - 1) * hop);
    let padded_len = (frames - 1) * hop + n;
    let window = params.window_coeffs();
    let fft = FftPair::new(n);

    let mut norm = vec![0.0; padded_len];
    for f in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[f * hop + i] += w * w;
        }
    }
    let norm_floor = 1e-10 * norm.iter().cloned().fold(0.0, f64::max);

    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(channels);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut acc = vec![0.0; padded_len.max(n / 2 + out_len)];
    for c in 0..channels {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for f in 0..frames {
            for k in 0..bins {
                buf[k] = spec.data[[f, k, c]];
            }
            // Hermitian completion; DC and Nyquist imaginary parts drop out.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            fft.inverse.process(&mut buf);
            let start = f * hop;
            for (i, w) in window.iter().enumerate() {
                acc[start + i] += buf[i].re * scale * w;
            }
        }
        let ch: Vec<f64> = (0..out_len)
            .map(|i| {
                let p = i + n / 2;
                let wsum = norm.get(p).copied().unwrap_or(0.0);
                if wsum > norm_floor {
                    acc[p] / wsum
                } else {
                    0.0
                }
            })
            .collect();
        out.push(ch);
    }
    Ok(out)
}

/// `x ↦ |x|^0.5 · e^{j∠x}`, computed as `x · max(|x|, floor)^{-1/2}`.
pub fn compress(spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    spec.ensure_domain(Domain::Stft)?;
    Ok(spec.map(compress_value).with_domain(Domain::Compressive))
}

/// `x' ↦ |x'|² · e^{j∠x'}`, computed as `x' · max(|x'|, floor)`.
pub fn decompress(spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    spec.ensure_domain(Domain::Compressive)?;
    Ok(spec.map(decompress_value).with_domain(Domain::Stft))
}

pub fn compress_value(x: Complex64) -> Complex64 {
    x / x.norm().max(MAG_FLOOR).sqrt()
}

pub fn decompress_value(x: Complex64) -> Complex64 {
    x * x.norm().max(MAG_FLOOR)
}

/// Vector-Jacobian product of [`decompress`] at `x_prime`.
///
/// For `x' = a + jb` with `r = |x'|` the Jacobian on `(a, b)` is
/// `r·I + (1/r)·[a b]ᵀ[a b]`, which is symmetric. Below the floor the map is
/// `x'·floor` and its Jacobian is `floor·I`.
pub fn decompress_vjp(
    x_prime: &ComplexSpectrogram,
    cotangent: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    x_prime.ensure_domain(Domain::Compressive)?;
    x_prime.ensure_same_shape(cotangent)?;
    let mut out = Array3::<Complex64>::zeros(x_prime.data.dim());
    Zip::from(&mut out)
        .and(&x_prime.data)
        .and(&cotangent.data)
        .for_each(|o, &x, &g| *o = decompress_vjp_value(x, g));
    Ok(ComplexSpectrogram::from_parts(out, cotangent).with_domain(Domain::Compressive))
}

pub fn decompress_vjp_value(x: Complex64, g: Complex64) -> Complex64 {
    let r = x.norm();
    if r < MAG_FLOOR {
        return g * MAG_FLOOR;
    }
    let proj = (x.re * g.re + x.im * g.im) / r;
    g * r + x * proj
}

/// Sum of squared channel magnitudes per `(frame, bin)`, averaged over channels.
pub(crate) fn mean_channel_power(spec: &ComplexSpectrogram) -> ndarray::Array2<f64> {
    let c = spec.n_channels() as f64;
    spec.data.map_axis(Axis(2), |lane| {
        lane.iter().map(|v| v.norm_sqr()).sum::<f64>() / c
    })
}
