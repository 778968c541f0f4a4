//! Noise estimation from a discriminative speech estimate, recursive spatial
//! covariance estimation, its loaded inverse, and the MCWF baseline.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;

use crate::error::{invalid_config, invalid_input, Result};
use crate::fcp::{apply_filter, estimate_filter, FcpParams};
use crate::linalg;
use crate::spectral::{ComplexSpectrogram, Domain};

/// Relative loading of the EMA carry-in `Φ̂(−1)`, scaled by the mean
/// per-bin noise power.
pub const EMA_INIT_LOAD: f64 = 1.0;

/// Default relative diagonal loading for [`invert_scm`].
pub const INVERSE_LOAD: f64 = 1e-4;

/// Per-`(frame, bin)` Hermitian `C × C` matrices, shape `L × K × C × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseScmField {
    mats: Array4<Complex64>,
    smoothing: f64,
}

impl NoiseScmField {
    /// Wraps raw matrices; `smoothing` is informational.
    pub fn new(mats: Array4<Complex64>, smoothing: f64) -> Result<Self> {
        let (l, k, c, c2) = mats.dim();
        if c != c2 || l == 0 || k == 0 || c == 0 {
            return Err(invalid_input(format!(
                "bad SCM field shape {l}x{k}x{c}x{c2}"
            )));
        }
        if !mats.iter().all(|v| v.is_finite()) {
            return Err(invalid_input("SCM field contains non-finite values"));
        }
        Ok(Self {
            mats: mats.as_standard_layout().into_owned(),
            smoothing,
        })
    }

    /// The same matrix for every frame: `per_bin` has shape `K × C × C`.
    pub fn time_invariant(per_bin: &Array3<Complex64>, frames: usize) -> Result<Self> {
        let (k, c, c2) = per_bin.dim();
        let mats = Array4::from_shape_fn((frames, k, c, c2), |(_, k, i, j)| per_bin[[k, i, j]]);
        Self::new(mats, 0.0)
    }

    pub fn mats(&self) -> &Array4<Complex64> {
        &self.mats
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn n_frames(&self) -> usize {
        self.mats.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.mats.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.mats.dim().2
    }

    /// Row-major `C × C` block at `(frame, bin)`.
    pub fn block(&self, frame: usize, bin: usize) -> &[Complex64] {
        let c = self.n_channels();
        let start = (frame * self.n_bins() + bin) * c * c;
        &self.mats.as_slice().expect("standard layout")[start..start + c * c]
    }

    fn block_mut(&mut self, frame: usize, bin: usize) -> &mut [Complex64] {
        let c = self.n_channels();
        let start = (frame * self.n_bins() + bin) * c * c;
        &mut self.mats.as_slice_mut().expect("standard layout")[start..start + c * c]
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            mats: self.mats.mapv(|v| v * factor),
            smoothing: self.smoothing,
        }
    }

    /// Largest `|A − Aᴴ|` entry relative to the largest diagonal magnitude.
    pub fn hermitian_defect(&self) -> f64 {
        let c = self.n_channels();
        let mut defect = 0.0f64;
        let mut scale = 0.0f64;
        for a in self
            .mats
            .as_slice()
            .expect("standard layout")
            .chunks_exact(c * c)
        {
            for i in 0..c {
                scale = scale.max(a[i * c + i].norm());
                for j in i..c {
                    defect = defect.max((a[i * c + j] - a[j * c + i].conj()).norm());
                }
            }
        }
        if scale > 0.0 {
            defect / scale
        } else {
            defect
        }
    }
}

/// `Ñ = Y − H̃ ⊛ X̃` with `H̃` the FCP estimate from the speech estimate to the mixture.
pub fn estimate_noise(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    fcp: FcpParams,
) -> Result<ComplexSpectrogram> {
    let h = estimate_filter(x_tilde, y, fcp)?;
    let image = apply_filter(&h, x_tilde)?;
    y.sub(&image)
}

/// Recursive average `Φ̂(ℓ) = α Φ̂(ℓ−1) + (1−α) N(ℓ)N(ℓ)ᴴ`.
///
/// The carry-in is `Φ̂(−1) = N(0)N(0)ᴴ + δ I`, `δ` being [`EMA_INIT_LOAD`]
/// times the bin's mean noise power over frames and channels.
pub fn estimate_scm(n: &ComplexSpectrogram, alpha: f64) -> Result<NoiseScmField> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid_config(format!(
            "SCM smoothing must lie in [0, 1), got {alpha}"
        )));
    }
    let (frames, bins, c) = n.shape();
    let nd = n.data();
    let mut field = NoiseScmField {
        mats: Array4::zeros((frames, bins, c, c)),
        smoothing: alpha,
    };
    let mut state = vec![Complex64::new(0.0, 0.0); c * c];
    for k in 0..bins {
        let mean_power = (0..frames)
            .flat_map(|l| (0..c).map(move |i| (l, i)))
            .map(|(l, i)| nd[[l, k, i]].norm_sqr())
            .sum::<f64>()
            / (frames * c) as f64;
        let load = EMA_INIT_LOAD * mean_power;
        for i in 0..c {
            for j in 0..c {
                state[i * c + j] = nd[[0, k, i]] * nd[[0, k, j]].conj();
            }
            state[i * c + i] += load;
        }
        for l in 0..frames {
            for i in 0..c {
                let ni = nd[[l, k, i]];
                for j in i..c {
                    let v = alpha * state[i * c + j] + (1.0 - alpha) * ni * nd[[l, k, j]].conj();
                    state[i * c + j] = v;
                    state[j * c + i] = v.conj();
                }
                state[i * c + i].im = 0.0;
            }
            field.block_mut(l, k).copy_from_slice(&state);
        }
    }
    Ok(field)
}

/// `(Φ + δI)⁻¹` per `(frame, bin)` with `δ = delta_rel · tr(Φ)/C`, or
/// `δ = delta_rel` for an all-zero matrix.
pub fn invert_scm(phi: &NoiseScmField, delta_rel: f64) -> Result<NoiseScmField> {
    if !(delta_rel > 0.0) {
        return Err(invalid_config(format!(
            "loading must be positive, got {delta_rel}"
        )));
    }
    let c = phi.n_channels();
    let mut out = phi.clone();
    let mut work = vec![Complex64::new(0.0, 0.0); c * c];
    for l in 0..phi.n_frames() {
        for k in 0..phi.n_bins() {
            work.copy_from_slice(phi.block(l, k));
            linalg::hermitian_part(&mut work, c);
            let trace = linalg::trace_re(&work, c);
            let delta = if trace > 0.0 {
                delta_rel * trace / c as f64
            } else {
                delta_rel
            };
            for i in 0..c {
                work[i * c + i] += delta;
            }
            let inv = linalg::inverse_hpd(&work, c);
            out.block_mut(l, k).copy_from_slice(&inv);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McwfParams {
    /// Relative diagonal loading of the mixture covariance.
    pub loading: f64,
}

impl Default for McwfParams {
    fn default() -> Self {
        Self { loading: 1e-7 }
    }
}

/// Time-invariant per-bin weights `w(k) = (Φ_YY + δI)⁻¹ φ_YX̃`, shape `K × C`.
pub fn mcwf_weights(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    params: McwfParams,
) -> Result<Array2<Complex64>> {
    x_tilde.ensure_single_channel("MCWF target")?;
    let (frames, bins, c) = y.shape();
    if x_tilde.n_frames() != frames || x_tilde.n_bins() != bins {
        return Err(invalid_input(format!(
            "mixture is {frames}x{bins} but target is {}x{}",
            x_tilde.n_frames(),
            x_tilde.n_bins()
        )));
    }
    let yd = y.data();
    let xd = x_tilde.data();
    let inv_l = 1.0 / frames as f64;
    let mut weights = Array2::zeros((bins, c));
    let mut cov = vec![Complex64::new(0.0, 0.0); c * c];
    let mut cross = vec![Complex64::new(0.0, 0.0); c];
    for k in 0..bins {
        cov.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        cross.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for l in 0..frames {
            let xc = xd[[l, k, 0]].conj();
            for i in 0..c {
                let yi = yd[[l, k, i]];
                cross[i] += yi * xc * inv_l;
                for j in i..c {
                    cov[i * c + j] += yi * yd[[l, k, j]].conj() * inv_l;
                }
            }
        }
        for i in 0..c {
            for j in 0..i {
                cov[i * c + j] = cov[j * c + i].conj();
            }
        }
        let trace = linalg::trace_re(&cov, c);
        if !(trace > 0.0) {
            continue;
        }
        let delta = params.loading * trace / c as f64;
        for i in 0..c {
            cov[i * c + i] += delta;
        }
        let w = linalg::solve_hpd(&cov, c, &cross);
        for (i, v) in w.into_iter().enumerate() {
            weights[[k, i]] = v;
        }
    }
    Ok(weights)
}

/// `out(ℓ,k) = w(k)ᴴ Y(ℓ,k)`.
pub fn apply_mcwf_weights(
    weights: &Array2<Complex64>,
    y: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    let (frames, bins, c) = y.shape();
    if weights.dim() != (bins, c) {
        return Err(invalid_input(format!(
            "weights are {:?}, mixture needs ({bins}, {c})",
            weights.dim()
        )));
    }
    let yd = y.data();
    let out = Array3::from_shape_fn((frames, bins, 1), |(l, k, _)| {
        (0..c).map(|i| weights[[k, i]].conj() * yd[[l, k, i]]).sum()
    });
    Ok(ComplexSpectrogram::from_parts(out, y).with_domain(Domain::Stft))
}

/// Single-frame time-invariant multi-channel Wiener filter toward `x_tilde`.
pub fn mcwf(
    y: &ComplexSpectrogram,
    x_tilde: &ComplexSpectrogram,
    params: McwfParams,
) -> Result<ComplexSpectrogram> {
    let w = mcwf_weights(y, x_tilde, params)?;
    apply_mcwf_weights(&w, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcp::MultiFrameFilter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, l: usize, k: usize, c: usize) -> ComplexSpectrogram {
        let data = Array3::from_shape_fn((l, k, c), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexSpectrogram::new(data, Domain::Stft).unwrap()
    }

    #[test]
    fn noise_of_exact_mixture_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_spec(&mut rng, 40, 4, 1);
        let taps = random_spec(&mut rng, 3, 4, 3).into_data();
        let h = MultiFrameFilter::new(taps).unwrap();
        let y = apply_filter(&h, &x).unwrap();
        let n = estimate_noise(
            &y,
            &x,
            FcpParams {
                n_taps: 5,
                eps: 1e-3,
            },
        )
        .unwrap();
        assert!(n.norm() <= 1e-6 * y.norm());
    }

    #[test]
    fn zero_speech_estimate_returns_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_spec(&mut rng, 10, 3, 2);
        let x = ComplexSpectrogram::zeros(10, 3, 1, Domain::Stft);
        let n = estimate_noise(&y, &x, FcpParams::default()).unwrap();
        assert_eq!(n.data(), y.data());
    }

    #[test]
    fn scm_without_smoothing_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = random_spec(&mut rng, 5, 2, 3);
        let phi = estimate_scm(&n, 0.0).unwrap();
        for l in 0..5 {
            for k in 0..2 {
                let b = phi.block(l, k);
                for i in 0..3 {
                    for j in 0..3 {
                        let e = n.data()[[l, k, i]] * n.data()[[l, k, j]].conj();
                        assert!((b[i * 3 + j] - e).norm() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn scm_constant_noise_geometric_decay() {
        let v = [Complex64::new(1.0, 0.5), Complex64::new(-0.3, 2.0)];
        let data = Array3::from_shape_fn((30, 1, 2), |(_, _, c)| v[c]);
        let n = ComplexSpectrogram::new(data, Domain::Stft).unwrap();
        let alpha = 0.8;
        let phi = estimate_scm(&n, alpha).unwrap();
        let power = (v[0].norm_sqr() + v[1].norm_sqr()) / 2.0;
        let load = EMA_INIT_LOAD * power;
        for l in 0..30 {
            let b = phi.block(l, 0);
            for i in 0..2 {
                for j in 0..2 {
                    let mut e = v[i] * v[j].conj();
                    if i == j {
                        e += alpha.powi(l as i32 + 1) * load;
                    }
                    assert!((b[i * 2 + j] - e).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scm_rejects_bad_alpha() {
        let n = ComplexSpectrogram::zeros(3, 2, 2, Domain::Stft);
        assert!(estimate_scm(&n, 1.0).is_err());
        assert!(estimate_scm(&n, -0.1).is_err());
    }

    #[test]
    fn invert_simple_matrices() {
        let mut mats = Array4::zeros((1, 2, 2, 2));
        mats[[0, 0, 0, 0]] = Complex64::new(1.0, 0.0);
        mats[[0, 0, 1, 1]] = Complex64::new(1.0, 0.0);
        mats[[0, 1, 0, 0]] = Complex64::new(4.0, 0.0);
        mats[[0, 1, 1, 1]] = Complex64::new(1.0, 0.0);
        let phi = NoiseScmField::new(mats, 0.0).unwrap();
        let inv = invert_scm(&phi, 1e-12).unwrap();
        let a = inv.block(0, 0);
        assert!((a[0].re - 1.0).abs() < 1e-10 && (a[3].re - 1.0).abs() < 1e-10);
        let b = inv.block(0, 1);
        assert!((b[0].re - 0.25).abs() < 1e-10 && (b[3].re - 1.0).abs() < 1e-10);
        assert!(b[1].norm() < 1e-15);
    }

    #[test]
    fn invert_zero_matrix_uses_absolute_loading() {
        let phi = NoiseScmField::new(Array4::zeros((1, 1, 2, 2)), 0.0).unwrap();
        let inv = invert_scm(&phi, 1e-4).unwrap();
        assert!((inv.block(0, 0)[0].re - 1e4).abs() < 1e-6);
    }

    #[test]
    fn mcwf_scalar_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_spec(&mut rng, 50, 6, 1);
        let out = mcwf(&y, &y, McwfParams::default()).unwrap();
        assert!(out.sub(&y).unwrap().norm() < 1e-6 * y.norm());
    }

    #[test]
    fn mcwf_ignores_silent_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_spec(&mut rng, 50, 6, 1);
        let mut data = Array3::zeros((50, 6, 2));
        data.slice_mut(ndarray::s![.., .., 0..1]).assign(x.data());
        let y = ComplexSpectrogram::new(data, Domain::Stft).unwrap();
        let w = mcwf_weights(&y, &x, McwfParams::default()).unwrap();
        for k in 0..6 {
            assert!((w[[k, 0]] - Complex64::new(1.0, 0.0)).norm() < 1e-6);
            assert!(w[[k, 1]].norm() < 1e-12);
        }
        let out = mcwf(&y, &x, McwfParams::default()).unwrap();
        assert!(out.sub(&x).unwrap().norm() < 1e-6 * x.norm());
    }

    #[test]
    fn mcwf_frozen_weights_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y1 = random_spec(&mut rng, 20, 3, 3);
        let y2 = random_spec(&mut rng, 20, 3, 3);
        let x = random_spec(&mut rng, 20, 3, 1);
        let w = mcwf_weights(&y1, &x, McwfParams::default()).unwrap();
        let combo = y1.scale(2.0).add_scaled(-0.5, &y2).unwrap();
        let lhs = apply_mcwf_weights(&w, &combo).unwrap();
        let rhs = apply_mcwf_weights(&w, &y1)
            .unwrap()
            .scale(2.0)
            .add_scaled(-0.5, &apply_mcwf_weights(&w, &y2).unwrap())
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().norm() < 1e-12 * lhs.norm());
    }
}
