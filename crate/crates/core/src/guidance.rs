//! Gaussian log-likelihood of the mixture under the fixed noise covariance,
//! and its gradient with respect to the compressive diffusion state.
//!
//! The chain differentiated is
//! `x_t → ε̂ → x̂₀' (Tweedie) → x̂₀ (decompress) → N̂ = Y − Ĥ ⊛ x̂₀ → −½ Σ N̂ᴴ Φ⁻¹ N̂`,
//! with `Ĥ` re-estimated by FCP at every call but treated as a constant.

use ndarray::Array3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::{tweedie_denoise, Denoiser, DiffusionSchedule};
use crate::error::{invalid_config, invalid_input, Result};
use crate::fcp::{apply_filter, apply_filter_adjoint, estimate_filter, FcpParams};
use crate::noise_model::NoiseScmField;
use crate::spectral::{decompress, decompress_vjp, ComplexSpectrogram};

/// Tolerated relative Hermitian defect of `Φ⁻¹`.
const HERMITIAN_TOL: f64 = 1e-9;

/// How the denoiser Jacobian enters `∂x̂₀'/∂x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JacobianPolicy {
    /// `(I − √(1−ᾱ) ∂ε̂/∂x_t) / √ᾱ` using the denoiser's VJP.
    ExactVjp,
    /// `I / √ᾱ`, dropping the denoiser Jacobian.
    TweedieIdentity,
}

impl JacobianPolicy {
    /// Exact when the denoiser supports it, otherwise the Tweedie surrogate.
    pub fn default_for<D: Denoiser + ?Sized>(denoiser: &D) -> Self {
        if denoiser.has_exact_vjp() {
            JacobianPolicy::ExactVjp
        } else {
            JacobianPolicy::TweedieIdentity
        }
    }
}

/// Gradient together with the quantities it was computed from.
#[derive(Debug, Clone)]
pub struct Score {
    pub grad: ComplexSpectrogram,
    pub log_likelihood: f64,
    pub residual: ComplexSpectrogram,
}

/// `−½ Σ_{ℓ,k} N̂ᴴ Φ⁻¹ N̂`, constants dropped.
pub fn log_likelihood(n_hat: &ComplexSpectrogram, phi_inv: &NoiseScmField) -> Result<f64> {
    check_precision(n_hat, phi_inv)?;
    Ok(quadratic_form(n_hat, phi_inv).0)
}

pub(crate) fn check_precision(n_hat: &ComplexSpectrogram, phi_inv: &NoiseScmField) -> Result<()> {
    let (l, k, c) = n_hat.shape();
    if (phi_inv.n_frames(), phi_inv.n_bins(), phi_inv.n_channels()) != (l, k, c) {
        return Err(invalid_input(format!(
            "residual is {l}x{k}x{c} but precision field is {}x{}x{}",
            phi_inv.n_frames(),
            phi_inv.n_bins(),
            phi_inv.n_channels()
        )));
    }
    let defect = phi_inv.hermitian_defect();
    if defect > HERMITIAN_TOL {
        return Err(invalid_input(format!(
            "precision field is not Hermitian (defect {defect:.3e})"
        )));
    }
    Ok(())
}

/// Returns the log-likelihood and `Φ⁻¹ N̂`.
fn quadratic_form(
    n_hat: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
) -> (f64, ComplexSpectrogram) {
    let c = n_hat.n_channels();
    let nd = n_hat.data().as_standard_layout();
    let mut pn = Array3::<Complex64>::zeros(n_hat.shape());
    let mats = phi_inv.mats().as_slice().expect("standard layout");
    let mut total = 0.0;
    let cells = nd.as_slice().expect("standard layout").chunks_exact(c);
    let out = pn
        .as_slice_mut()
        .expect("standard layout")
        .chunks_exact_mut(c);
    for ((n, o), p) in cells.zip(out).zip(mats.chunks_exact(c * c)) {
        for i in 0..c {
            let row = &p[i * c..(i + 1) * c];
            let acc: Complex64 = row.iter().zip(n).map(|(a, b)| a * b).sum();
            o[i] = acc;
            total += (n[i].conj() * acc).re;
        }
    }
    (-0.5 * total, ComplexSpectrogram::from_parts(pn, n_hat))
}

/// Likelihood score `∇_{x_t} log p(Y | x̂₀(x_t))`.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_score<D: Denoiser + ?Sized>(
    x_t: &ComplexSpectrogram,
    denoiser: &mut D,
    y: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
    fcp: FcpParams,
    t: usize,
    sched: &DiffusionSchedule,
    policy: JacobianPolicy,
) -> Result<ComplexSpectrogram> {
    check_precision(y, phi_inv)?;
    let eps_hat = denoiser.predict_noise(x_t, t)?;
    Ok(score_with_eps(x_t, &eps_hat, denoiser, y, phi_inv, fcp, t, sched, policy)?.grad)
}

/// [`likelihood_score`] reusing an already computed `ε̂ = ε_θ(x_t, t)`.
/// Does not re-validate `phi_inv`.
#[allow(clippy::too_many_arguments)]
pub fn score_with_eps<D: Denoiser + ?Sized>(
    x_t: &ComplexSpectrogram,
    eps_hat: &ComplexSpectrogram,
    denoiser: &mut D,
    y: &ComplexSpectrogram,
    phi_inv: &NoiseScmField,
    fcp: FcpParams,
    t: usize,
    sched: &DiffusionSchedule,
    policy: JacobianPolicy,
) -> Result<Score> {
    if policy == JacobianPolicy::ExactVjp && !denoiser.has_exact_vjp() {
        return Err(invalid_config(
            "exact VJP policy needs a denoiser with an exact Jacobian",
        ));
    }
    let x0_prime = tweedie_denoise(x_t, eps_hat, t, sched)?;
    let x0 = decompress(&x0_prime)?;
    let h = estimate_filter(&x0, y, fcp)?;
    let residual = y.sub(&apply_filter(&h, &x0)?)?;
    let (log_likelihood, weighted) = quadratic_form(&residual, phi_inv);

    let grad_x0 = apply_filter_adjoint(&h, &weighted)?;
    let grad_x0_prime = decompress_vjp(&x0_prime, &grad_x0)?;
    let ab = sched.alpha_bar(t);
    let grad = match policy {
        JacobianPolicy::TweedieIdentity => grad_x0_prime.scale(1.0 / ab.sqrt()),
        JacobianPolicy::ExactVjp => {
            let through = denoiser.vjp(x_t, t, &grad_x0_prime)?;
            grad_x0_prime
                .add_scaled(-(1.0 - ab).sqrt(), &through)?
                .scale(1.0 / ab.sqrt())
        }
    };
    Ok(Score {
        grad,
        log_likelihood,
        residual,
    })
}

/// `x ← x + ξ · (1−α_t)/√α_t · G`.
pub fn apply_guidance(
    x_prev: &ComplexSpectrogram,
    grad: &ComplexSpectrogram,
    t: usize,
    xi: f64,
    sched: &DiffusionSchedule,
) -> Result<ComplexSpectrogram> {
    if !(xi >= 0.0) {
        return Err(invalid_config(format!(
            "guidance scale must be >= 0, got {xi}"
        )));
    }
    sched.check_step(t)?;
    let a = sched.alpha(t);
    x_prev.add_scaled(xi * (1.0 - a) / a.sqrt(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GaussianDenoiser, ZeroDenoiser};
    use crate::noise_model::{estimate_scm, invert_scm};
    use crate::spectral::{compress, Domain};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(
        rng: &mut ChaCha8Rng,
        l: usize,
        k: usize,
        c: usize,
        d: Domain,
    ) -> ComplexSpectrogram {
        let data = Array3::from_shape_fn((l, k, c), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        ComplexSpectrogram::new(data, d).unwrap()
    }

    fn identity_field(l: usize, k: usize, c: usize) -> NoiseScmField {
        let mats = Array4::from_shape_fn((l, k, c, c), |(_, _, i, j)| {
            Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        });
        NoiseScmField::new(mats, 0.0).unwrap()
    }

    #[test]
    fn log_likelihood_examples() {
        let zero = ComplexSpectrogram::zeros(2, 2, 2, Domain::Stft);
        assert_eq!(
            log_likelihood(&zero, &identity_field(2, 2, 2)).unwrap(),
            0.0
        );

        let mut n = ComplexSpectrogram::zeros(1, 1, 1, Domain::Stft);
        n.data_mut()[[0, 0, 0]] = Complex64::new(3.0, 4.0);
        assert_eq!(log_likelihood(&n, &identity_field(1, 1, 1)).unwrap(), -12.5);
    }

    #[test]
    fn log_likelihood_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = random_spec(&mut rng, 6, 3, 3, Domain::Stft);
        let phi_inv = invert_scm(&estimate_scm(&noise, 0.7).unwrap(), 1e-3).unwrap();
        let n = random_spec(&mut rng, 6, 3, 3, Domain::Stft);
        let mut expected = 0.0;
        for l in 0..6 {
            for k in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        expected += (n.data()[[l, k, i]].conj()
                            * phi_inv.mats()[[l, k, i, j]]
                            * n.data()[[l, k, j]])
                        .re;
                    }
                }
            }
        }
        let ll = log_likelihood(&n, &phi_inv).unwrap();
        assert!((ll + 0.5 * expected).abs() < 1e-10 * expected.abs());
        assert!(ll < 0.0);
    }

    #[test]
    fn log_likelihood_rejects_non_hermitian() {
        let mut mats = Array4::zeros((1, 1, 2, 2));
        mats[[0, 0, 0, 0]] = Complex64::new(1.0, 0.0);
        mats[[0, 0, 1, 1]] = Complex64::new(1.0, 0.0);
        mats[[0, 0, 0, 1]] = Complex64::new(0.5, 0.0);
        let phi = NoiseScmField::new(mats, 0.0).unwrap();
        let n = ComplexSpectrogram::zeros(1, 1, 2, Domain::Stft);
        assert!(log_likelihood(&n, &phi).is_err());
    }

    #[test]
    fn guidance_step_examples() {
        let sched = DiffusionSchedule::linear(10, 0.01, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_spec(&mut rng, 2, 2, 1, Domain::Compressive);
        let g = random_spec(&mut rng, 2, 2, 1, Domain::Compressive);
        assert_eq!(apply_guidance(&x, &g, 3, 0.0, &sched).unwrap(), x);
        assert_eq!(
            apply_guidance(&x, &g.scale(0.0), 3, 1.0, &sched).unwrap(),
            x
        );
        // α₁ = 0.99 → coefficient 0.01/√0.99.
        let unit = ComplexSpectrogram::new(
            Array3::from_elem((1, 1, 1), Complex64::new(1.0, 0.0)),
            Domain::Compressive,
        )
        .unwrap();
        let zero = unit.scale(0.0);
        let step = apply_guidance(&zero, &unit, 1, 1.0, &sched).unwrap();
        assert!((step.data()[[0, 0, 0]].re - 0.010050378152592).abs() < 1e-14);
        assert!(apply_guidance(&x, &g, 3, -1.0, &sched).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_spec(&mut rng, 8, 3, 1, Domain::Stft);
        let y = ComplexSpectrogram::new(
            Array3::from_shape_fn((8, 3, 2), |(l, k, c)| {
                x0.data()[[l, k, 0]] * (1.0 + c as f64)
            }),
            Domain::Stft,
        )
        .unwrap();
        // A point-mass prior at compress(x0) makes x̂₀ = x0 for any state.
        let mu = compress(&x0).unwrap();
        let mut den = GaussianDenoiser::isotropic(mu.clone(), 1e-30, sched.clone()).unwrap();
        let x_t = random_spec(&mut rng, 8, 3, 1, Domain::Compressive);
        let g = likelihood_score(
            &x_t,
            &mut den,
            &y,
            &identity_field(8, 3, 2),
            FcpParams {
                n_taps: 2,
                eps: 1e-3,
            },
            100,
            &sched,
            JacobianPolicy::ExactVjp,
        )
        .unwrap();
        assert!(g.norm() < 1e-8);
    }

    #[test]
    fn gradient_is_homogeneous_in_precision() {
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_spec(&mut rng, 5, 3, 2, Domain::Stft);
        let mu = random_spec(&mut rng, 5, 3, 1, Domain::Compressive);
        let mut den = GaussianDenoiser::isotropic(mu, 0.5, sched.clone()).unwrap();
        let noise = random_spec(&mut rng, 5, 3, 2, Domain::Stft);
        let phi_inv = invert_scm(&estimate_scm(&noise, 0.5).unwrap(), 1e-3).unwrap();
        let x_t = random_spec(&mut rng, 5, 3, 1, Domain::Compressive);
        let fcp = FcpParams {
            n_taps: 2,
            eps: 1e-3,
        };
        let g1 = likelihood_score(
            &x_t,
            &mut den,
            &y,
            &phi_inv,
            fcp,
            40,
            &sched,
            JacobianPolicy::ExactVjp,
        )
        .unwrap();
        let g2 = likelihood_score(
            &x_t,
            &mut den,
            &y,
            &phi_inv.scale(2.0),
            fcp,
            40,
            &sched,
            JacobianPolicy::ExactVjp,
        )
        .unwrap();
        assert!(g2.sub(&g1.scale(2.0)).unwrap().norm() <= 1e-12 * g2.norm());
    }

    #[test]
    fn tweedie_policy_equals_exact_for_constant_denoiser() {
        let sched = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_spec(&mut rng, 6, 2, 3, Domain::Stft);
        let noise = random_spec(&mut rng, 6, 2, 3, Domain::Stft);
        let phi_inv = invert_scm(&estimate_scm(&noise, 0.5).unwrap(), 1e-3).unwrap();
        let x_t = random_spec(&mut rng, 6, 2, 1, Domain::Compressive);
        let fcp = FcpParams {
            n_taps: 3,
            eps: 1e-3,
        };
        let exact = likelihood_score(
            &x_t,
            &mut ZeroDenoiser,
            &y,
            &phi_inv,
            fcp,
            77,
            &sched,
            JacobianPolicy::ExactVjp,
        )
        .unwrap();
        let approx = likelihood_score(
            &x_t,
            &mut ZeroDenoiser,
            &y,
            &phi_inv,
            fcp,
            77,
            &sched,
            JacobianPolicy::TweedieIdentity,
        )
        .unwrap();
        assert_eq!(exact, approx);
        assert!(exact.norm() > 0.0);
    }

    #[test]
    fn exact_policy_needs_exact_denoiser() {
        struct Opaque;
        impl Denoiser for Opaque {
            fn predict_noise(
                &mut self,
                x: &ComplexSpectrogram,
                _t: usize,
            ) -> Result<ComplexSpectrogram> {
                Ok(x.scale(0.0))
            }
        }
        let sched = DiffusionSchedule::default();
        let y = ComplexSpectrogram::zeros(3, 2, 1, Domain::Stft);
        let x_t = ComplexSpectrogram::zeros(3, 2, 1, Domain::Compressive);
        let r = likelihood_score(
            &x_t,
            &mut Opaque,
            &y,
            &identity_field(3, 2, 1),
            FcpParams::default(),
            5,
            &sched,
            JacobianPolicy::ExactVjp,
        );
        assert!(r.is_err());
        assert_eq!(
            JacobianPolicy::default_for(&Opaque),
            JacobianPolicy::TweedieIdentity
        );
        assert_eq!(
            JacobianPolicy::default_for(&ZeroDenoiser),
            JacobianPolicy::ExactVjp
        );
    }
}
