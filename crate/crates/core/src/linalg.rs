//! Small dense complex kernels for the per-bin solves. Matrices are
//! row-major `n × n` slices.

use num_complex::Complex64;

/// In-place Cholesky factorisation `A = L Lᴴ` of a Hermitian matrix; the
/// lower triangle of `a` is overwritten with `L`. Returns `false` if a pivot
/// is not strictly positive.
pub(crate) fn cholesky_in_place(a: &mut [Complex64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᴴ x = b` given the factor from [`cholesky_in_place`].
pub(crate) fn cholesky_solve(l: &[Complex64], n: usize, b: &mut [Complex64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i].re;
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i].conj() * b[k];
        }
        b[i] = s / l[i * n + i].re;
    }
}

/// Solves the Hermitian positive-definite system `a x = b`. Falls back to
/// progressively heavier diagonal loading if the factorisation breaks down.
pub(crate) fn solve_hpd(a: &[Complex64], n: usize, b: &[Complex64]) -> Vec<Complex64> {
    let mut work = a.to_vec();
    if !cholesky_in_place(&mut work, n) {
        let trace: f64 = (0..n)
            .map(|i| a[i * n + i].re.abs())
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        let mut load = 1e-12 * trace / n as f64;
        loop {
            work.copy_from_slice(a);
            for i in 0..n {
                work[i * n + i] += load;
            }
            if cholesky_in_place(&mut work, n) {
                break;
            }
            load *= 10.0;
        }
    }
    let mut x = b.to_vec();
    cholesky_solve(&work, n, &mut x);
    x
}

/// Inverse of a Hermitian positive-definite matrix, symmetrised so the
/// result is exactly Hermitian.
pub(crate) fn inverse_hpd(a: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut inv = vec![Complex64::new(0.0, 0.0); n * n];
    let mut e = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        e[j] = Complex64::new(1.0, 0.0);
        let col = solve_hpd(a, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    hermitian_part(&mut inv, n);
    inv
}

pub(crate) fn hermitian_part(a: &mut [Complex64], n: usize) {
    for i in 0..n {
        a[i * n + i].im = 0.0;
        for j in i + 1..n {
            let avg = (a[i * n + j] + a[j * n + i].conj()) * 0.5;
            a[i * n + j] = avg;
            a[j * n + i] = avg.conj();
        }
    }
}

pub(crate) fn trace_re(a: &[Complex64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i].re).sum()
}
