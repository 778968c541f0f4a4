//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dps_refine::fcp::RIDGE_REL;
use dps_refine::noise_model::{NoiseScmField, EMA_INIT_LOAD};
use dps_refine::{ComplexSpectrogram, Domain};
use nalgebra::DMatrix;
use ndarray::{Array3, Array4};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn random_array(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    scale: f64,
) -> Array3<Complex64> {
    Array3::from_shape_simple_fn(shape, || {
        c(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    })
}

pub fn random_spec(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    domain: Domain,
) -> ComplexSpectrogram {
    ComplexSpectrogram::new(random_array(rng, shape, 1.0), domain).unwrap()
}

/// Random Hermitian positive-definite field `B Bᴴ + 0.1 I`.
pub fn random_precision(
    rng: &mut ChaCha8Rng,
    frames: usize,
    bins: usize,
    ch: usize,
) -> NoiseScmField {
    let mut mats = Array4::zeros((frames, bins, ch, ch));
    for l in 0..frames {
        for k in 0..bins {
            let b = random_array(rng, (ch, ch, 1), 1.0);
            for i in 0..ch {
                for j in 0..ch {
                    let mut v: Complex64 =
                        (0..ch).map(|r| b[[i, r, 0]] * b[[j, r, 0]].conj()).sum();
                    if i == j {
                        v += 0.1;
                    }
                    mats[[l, k, i, j]] = v;
                }
            }
        }
    }
    NoiseScmField::new(mats, 0.0).unwrap()
}

/// Weighted least squares by SVD of the stacked system
/// `[W^½ A; √δ I] h ≈ [W^½ y; 0]`, with the weights recomputed from `y`.
pub fn dense_fcp(
    x: &Array3<Complex64>,
    y: &Array3<Complex64>,
    n_taps: usize,
    eps: f64,
) -> Array3<Complex64> {
    let (frames, bins, _) = x.dim();
    let channels = y.dim().2;
    let mut power = vec![vec![0.0; bins]; frames];
    let mut max = 0.0f64;
    for l in 0..frames {
        for k in 0..bins {
            let p = (0..channels)
                .map(|ch| y[[l, k, ch]].norm_sqr())
                .sum::<f64>()
                / channels as f64;
            power[l][k] = p;
            max = max.max(p);
        }
    }
    let lambda = |l: usize, k: usize| {
        if max > 0.0 {
            power[l][k] + eps * max
        } else {
            1.0
        }
    };

    let mut out = Array3::zeros((n_taps, bins, channels));
    for k in 0..bins {
        let a = DMatrix::from_fn(frames, n_taps, |m, n| {
            if m >= n {
                x[[m - n, k, 0]]
            } else {
                c(0.0, 0.0)
            }
        });
        let w_half = DMatrix::from_fn(frames, frames, |i, j| {
            if i == j {
                c(1.0 / lambda(i, k).sqrt(), 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        let wa = &w_half * &a;
        let trace: f64 = (wa.adjoint() * &wa).trace().re;
        if trace <= 0.0 {
            continue;
        }
        let delta = if n_taps > 1 {
            RIDGE_REL * trace / n_taps as f64
        } else {
            0.0
        };
        let mut stacked = DMatrix::zeros(frames + n_taps, n_taps);
        stacked.view_mut((0, 0), (frames, n_taps)).copy_from(&wa);
        for n in 0..n_taps {
            stacked[(frames + n, n)] = c(delta.sqrt(), 0.0);
        }
        for ch in 0..channels {
            let mut rhs = DMatrix::zeros(frames + n_taps, 1);
            for m in 0..frames {
                rhs[(m, 0)] = y[[m, k, ch]] / lambda(m, k).sqrt();
            }
            let h = stacked.clone().svd(true, true).solve(&rhs, 1e-300).unwrap();
            for n in 0..n_taps {
                out[[n, k, ch]] = h[(n, 0)];
            }
        }
    }
    out
}

/// Causal frame convolution by nested loops.
pub fn convolve(h: &Array3<Complex64>, x: &Array3<Complex64>) -> Array3<Complex64> {
    let (n_taps, bins, channels) = h.dim();
    let frames = x.dim().0;
    Array3::from_shape_fn((frames, bins, channels), |(m, k, ch)| {
        (0..n_taps)
            .filter(|&n| n <= m)
            .map(|n| h[[n, k, ch]] * x[[m - n, k, 0]])
            .sum()
    })
}

pub fn frobenius(a: &Array3<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub fn rel_err(a: &Array3<Complex64>, b: &Array3<Complex64>) -> f64 {
    frobenius(&(a - b)) / frobenius(b).max(f64::MIN_POSITIVE)
}

pub fn re_dot(a: &Array3<Complex64>, b: &Array3<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// `−½ Σ N̂ᴴ P N̂` with plain loops.
pub fn quad_loglik(n: &Array3<Complex64>, p: &NoiseScmField) -> f64 {
    let (frames, bins, ch) = n.dim();
    let mut total = 0.0;
    for l in 0..frames {
        for k in 0..bins {
            for i in 0..ch {
                for j in 0..ch {
                    total += (n[[l, k, i]].conj() * p.mats()[[l, k, i, j]] * n[[l, k, j]]).re;
                }
            }
        }
    }
    -0.5 * total
}

/// `ᾱ_t` of the linear schedule, recomputed from scratch.
pub fn alpha_bar(t: usize, steps: usize, beta_1: f64, beta_t: f64) -> f64 {
    (1..=t)
        .map(|s| 1.0 - (beta_1 + (s - 1) as f64 * (beta_t - beta_1) / (steps - 1) as f64))
        .product()
}

/// Outcome of one finite-difference check of the likelihood score.
pub struct FdReport {
    pub max_rel_err: f64,
    pub components: usize,
    /// Finite difference and analytic value at the worst component.
    pub worst: (f64, f64),
    /// `‖fd‖∞`.
    pub scale: f64,
}

/// Compares `likelihood_score` (exact VJP, Gaussian denoiser) against
/// Richardson-extrapolated central differences of an independently coded objective with `Ĥ` frozen at the
/// base point. Relative errors use the denominator `max(|fd_i|, floor·‖fd‖∞)`.
pub fn likelihood_fd_check(seed: u64, floor: f64) -> FdReport {
    use dps_refine::fcp::{estimate_filter, FcpParams};
    use dps_refine::guidance::{likelihood_score, JacobianPolicy};
    use dps_refine::{DiffusionSchedule, GaussianDenoiser};
    use rand::SeedableRng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(3..=5);
    let bins = rng.random_range(1..=3);
    let ch = rng.random_range(1..=3);
    let n_taps = rng.random_range(1..=3);
    let t = rng.random_range(1..=1000);
    let sched = DiffusionSchedule::default();

    let mu = random_spec(&mut rng, (frames, bins, 1), Domain::Compressive);
    let s2 = ndarray::Array2::from_shape_simple_fn((frames, bins), || rng.random_range(0.2..2.0));
    let y = random_spec(&mut rng, (frames, bins, ch), Domain::Stft);
    let x_t = random_spec(&mut rng, (frames, bins, 1), Domain::Compressive);
    let p = random_precision(&mut rng, frames, bins, ch);
    let fcp = FcpParams { n_taps, eps: 1e-3 };

    let mut den = GaussianDenoiser::new(mu.clone(), s2.clone(), sched.clone()).unwrap();
    let g = likelihood_score(
        &x_t,
        &mut den,
        &y,
        &p,
        fcp,
        t,
        &sched,
        JacobianPolicy::ExactVjp,
    )
    .unwrap();

    let ab = alpha_bar(t, 1000, 1e-4, 0.02);
    let x0_of = |x: &Array3<Complex64>| {
        Array3::from_shape_fn((frames, bins, 1), |(l, k, _)| {
            let v = s2[[l, k]];
            let e = (x[[l, k, 0]] * (v * ab.sqrt()) + mu.data()[[l, k, 0]] * (1.0 - ab))
                / (ab * v + 1.0 - ab);
            e * e.norm()
        })
    };
    let base = x0_of(x_t.data());
    let h = estimate_filter(
        &ComplexSpectrogram::new(base, Domain::Stft).unwrap(),
        &y,
        fcp,
    )
    .unwrap();
    let taps = h.taps().clone();
    let objective = |x: &Array3<Complex64>| {
        let resid = y.data() - &convolve(&taps, &x0_of(x));
        quad_loglik(&resid, &p)
    };

    let mut fd = Vec::new();
    let mut an = Vec::new();
    for l in 0..frames {
        for k in 0..bins {
            for part in 0..2 {
                let v = x_t.data()[[l, k, 0]];
                let central = |step: f64| {
                    let d = if part == 0 {
                        c(step, 0.0)
                    } else {
                        c(0.0, step)
                    };
                    let mut plus = x_t.data().clone();
                    plus[[l, k, 0]] += d;
                    let mut minus = x_t.data().clone();
                    minus[[l, k, 0]] -= d;
                    (objective(&plus) - objective(&minus)) / (2.0 * step)
                };
                let step = 1e-5 * v.norm().max(1.0);
                fd.push((4.0 * central(step / 2.0) - central(step)) / 3.0);
                let gv = g.data()[[l, k, 0]];
                an.push(if part == 0 { gv.re } else { gv.im });
            }
        }
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = FdReport {
        max_rel_err: 0.0,
        components: fd.len(),
        worst: (0.0, 0.0),
        scale,
    };
    for (&f, &a) in fd.iter().zip(&an) {
        let e = (f - a).abs() / f.abs().max(floor * scale).max(f64::MIN_POSITIVE);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = (f, a);
        }
    }
    report
}

/// `Φ̂(l)` by explicit summation of the EMA recursion from its carry-in.
pub fn unrolled_scm(n: &Array3<Complex64>, alpha: f64) -> Vec<Vec<DMatrix<Complex64>>> {
    let (frames, bins, ch) = n.dim();
    (0..bins)
        .map(|k| {
            let outer =
                |l: usize| DMatrix::from_fn(ch, ch, |i, j| n[[l, k, i]] * n[[l, k, j]].conj());
            let power = (0..frames)
                .map(|l| (0..ch).map(|i| n[[l, k, i]].norm_sqr()).sum::<f64>())
                .sum::<f64>()
                / (frames * ch) as f64;
            let init =
                outer(0) + DMatrix::identity(ch, ch) * Complex64::new(EMA_INIT_LOAD * power, 0.0);
            (0..frames)
                .map(|l| {
                    let mut acc = init.clone() * Complex64::new(alpha.powi(l as i32 + 1), 0.0);
                    for i in 0..=l {
                        acc += outer(i)
                            * Complex64::new((1.0 - alpha) * alpha.powi((l - i) as i32), 0.0);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}
