//! Forward convolutive prediction: per-bin weighted least-squares estimation
//! of multi-frame STFT-domain filters, their application and adjoint.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::linalg;
use crate::spectral::{mean_channel_power, ComplexSpectrogram};

/// Relative ridge added to the normal matrix, scaled by its mean diagonal.
pub const RIDGE_REL: f64 = 1e-8;

/// Complex filter taps, shape `N_H × K × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFrameFilter {
    taps: Array3<Complex64>,
}

impl MultiFrameFilter {
    pub fn new(taps: Array3<Complex64>) -> Result<Self> {
        let (n, k, c) = taps.dim();
        if n == 0 || k == 0 || c == 0 {
            return Err(invalid_input(format!("empty filter shape {n}x{k}x{c}")));
        }
        if !taps.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(invalid_input("filter contains non-finite taps"));
        }
        Ok(Self { taps })
    }

    /// Unit impulse at `delay` for every bin and channel.
    pub fn impulse(n_taps: usize, bins: usize, channels: usize, delay: usize) -> Self {
        let mut taps = Array3::zeros((n_taps, bins, channels));
        taps.slice_mut(ndarray::s![delay, .., ..])
            .fill(Complex64::new(1.0, 0.0));
        Self { taps }
    }

    pub fn taps(&self) -> &Array3<Complex64> {
        &self.taps
    }

    pub fn into_taps(self) -> Array3<Complex64> {
        self.taps
    }

    pub fn n_taps(&self) -> usize {
        self.taps.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.taps.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.taps.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcpParams {
    pub n_taps: usize,
    pub eps: f64,
}

impl Default for FcpParams {
    fn default() -> Self {
        Self {
            n_taps: 13,
            eps: 1e-3,
        }
    }
}

impl FcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_taps == 0 {
            return Err(invalid_config("FCP n_taps must be >= 1"));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(invalid_config(format!(
                "FCP eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-`(frame, bin)` weights `λ̂`.
#[derive(Debug, Clone)]
pub struct FcpWeights {
    pub values: Array2<f64>,
    /// Set when the target was identically zero and uniform weights were used.
    pub degenerate: bool,
}

/// `λ̂(m,k) = P(m,k) + eps · max P`, with `P` the channel-averaged power of `y`.
pub fn fcp_weights(y: &ComplexSpectrogram, eps: f64) -> FcpWeights {
    let power = mean_channel_power(y);
    let max = power.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return FcpWeights {
            values: Array2::from_elem(power.dim(), 1.0),
            degenerate: true,
        };
    }
    let floor = eps * max;
    FcpWeights {
        values: power.mapv(|p| p + floor),
        degenerate: false,
    }
}

/// Weighted least-squares filter from `x` (single channel) to every channel of `y`.
///
/// For each `(c, k)` solves `(AᴴWA + δI) h = AᴴW y` where `A` is the causal
/// lag matrix of `x` in bin `k`, `W = diag(1/λ̂)` and
/// `δ = RIDGE_REL · tr(AᴴWA) / N_H` (no ridge for single-tap filters). Bins where `x` is silent get zero taps.
pub fn estimate_filter(
    x: &ComplexSpectrogram,
    y: &ComplexSpectrogram,
    params: FcpParams,
) -> Result<MultiFrameFilter> {
    params.validate()?;
    x.ensure_single_channel("FCP input")?;
    let (frames, bins, _) = x.shape();
    let (y_frames, y_bins, channels) = y.shape();
    if frames != y_frames || bins != y_bins {
        return Err(invalid_input(format!(
            "FCP input is {frames}x{bins} but target is {y_frames}x{y_bins}"
        )));
    }
    let weights = fcp_weights(y, params.eps);
    let n = params.n_taps;
    let xd = x.data().as_standard_layout();
    let xs = xd.as_slice().expect("standard layout");
    let yd = y.data().as_standard_layout();
    let ys = yd.as_slice().expect("standard layout");

    let mut taps = Array3::<Complex64>::zeros((n, bins, channels));
    let mut gram = vec![Complex64::new(0.0, 0.0); n * n];
    let mut lagged = vec![Complex64::new(0.0, 0.0); n];
    let mut rhs = vec![Complex64::new(0.0, 0.0); n * channels];
    for k in 0..bins {
        gram.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        rhs.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for m in 0..frames {
            let w = 1.0 / weights.values[[m, k]];
            let depth = n.min(m + 1);
            for (lag, slot) in lagged.iter_mut().enumerate().take(depth) {
                *slot = xs[(m - lag) * bins + k];
            }
            let yv = &ys[(m * bins + k) * channels..(m * bins + k + 1) * channels];
            for n1 in 0..depth {
                let a = lagged[n1].conj() * w;
                for (g, l2) in gram[n1 * n + n1..n1 * n + depth]
                    .iter_mut()
                    .zip(&lagged[n1..depth])
                {
                    *g += a * l2;
                }
                for (c, yc) in yv.iter().enumerate() {
                    rhs[c * n + n1] += a * yc;
                }
            }
        }
        for n1 in 0..n {
            for n2 in 0..n1 {
                gram[n1 * n + n2] = gram[n2 * n + n1].conj();
            }
        }
        let trace = linalg::trace_re(&gram, n);
        if !(trace > 0.0) {
            continue;
        }
        // A 1×1 system is regular whenever its trace is positive.
        let ridge = if n > 1 {
            RIDGE_REL * trace / n as f64
        } else {
            0.0
        };
        for i in 0..n {
            gram[i * n + i] += ridge;
        }
        let mut factor = gram.clone();
        let factored = linalg::cholesky_in_place(&mut factor, n);
        for c in 0..channels {
            let b = &rhs[c * n..(c + 1) * n];
            let h = if factored {
                let mut h = b.to_vec();
                linalg::cholesky_solve(&factor, n, &mut h);
                h
            } else {
                linalg::solve_hpd(&gram, n, b)
            };
            for (tap, v) in h.into_iter().enumerate() {
                taps[[tap, k, c]] = v;
            }
        }
    }
    Ok(MultiFrameFilter { taps })
}

/// Causal per-bin convolution across frames: `out^c(m) = Σ_n H^c(n) x(m−n)`.
pub fn apply_filter(h: &MultiFrameFilter, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    x.ensure_single_channel("filter input")?;
    let (frames, bins, _) = x.shape();
    if h.n_bins() != bins {
        return Err(invalid_input(format!(
            "filter has {} bins, input has {bins}",
            h.n_bins()
        )));
    }
    let (n_taps, _, channels) = h.taps.dim();
    let xd = x.data().as_standard_layout();
    let xs = xd.as_slice().expect("standard layout");
    let taps = h.taps.as_standard_layout();
    let ts = taps.as_slice().expect("standard layout");
    let slab = bins * channels;
    let mut out = Array3::<Complex64>::zeros((frames, bins, channels));
    let os = out.as_slice_mut().expect("standard layout");
    for m in 0..frames {
        let o = &mut os[m * slab..(m + 1) * slab];
        for n in 0..n_taps.min(m + 1) {
            let xf = &xs[(m - n) * bins..(m - n + 1) * bins];
            let hn = &ts[n * slab..(n + 1) * slab];
            for ((oc, hc), xv) in o
                .chunks_exact_mut(channels)
                .zip(hn.chunks_exact(channels))
                .zip(xf)
            {
                for (ov, hv) in oc.iter_mut().zip(hc) {
                    *ov += hv * xv;
                }
            }
        }
    }
    Ok(ComplexSpectrogram::from_parts(out, x))
}

/// Adjoint of [`apply_filter`] under `Re⟨·,·⟩`:
/// `out(m) = Σ_c Σ_n conj(H^c(n)) r^c(m+n)`.
pub fn apply_filter_adjoint(
    h: &MultiFrameFilter,
    r: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    let (frames, bins, channels) = r.shape();
    if h.n_bins() != bins || h.n_channels() != channels {
        return Err(invalid_input(format!(
            "filter is {}x{} (bins x channels), residual is {bins}x{channels}",
            h.n_bins(),
            h.n_channels()
        )));
    }
    let n_taps = h.n_taps();
    let rd = r.data().as_standard_layout();
    let rs = rd.as_slice().expect("standard layout");
    let taps = h.taps.as_standard_layout();
    let ts = taps.as_slice().expect("standard layout");
    let slab = bins * channels;
    let mut out = Array3::<Complex64>::zeros((frames, bins, 1));
    let os = out.as_slice_mut().expect("standard layout");
    for m in 0..frames {
        let o = &mut os[m * bins..(m + 1) * bins];
        for n in 0..n_taps.min(frames - m) {
            let rf = &rs[(m + n) * slab..(m + n + 1) * slab];
            let hn = &ts[n * slab..(n + 1) * slab];
            for ((ov, hc), rc) in o
                .iter_mut()
                .zip(hn.chunks_exact(channels))
                .zip(rf.chunks_exact(channels))
            {
                *ov += hc
                    .iter()
                    .zip(rc)
                    .map(|(a, b)| a.conj() * b)
                    .sum::<Complex64>();
            }
        }
    }
    Ok(ComplexSpectrogram::from_parts(out, r))
}

/// Single-tap FCP of `x0` toward `x_ref`, applied to `x0`.
pub fn align(
    x0: &ComplexSpectrogram,
    x_ref: &ComplexSpectrogram,
    eps: f64,
) -> Result<ComplexSpectrogram> {
    x0.ensure_same_shape(x_ref)?;
    let h = estimate_filter(x0, x_ref, FcpParams { n_taps: 1, eps })?;
    apply_filter(&h, x0)
}
