//! FFT-backed truncated power-series products and Newton inversion.
//!
//! The renewal recurrence is the coefficient sequence of 1/(1 - P(z)); for
//! large horizons it is computed by block-doubling Newton inversion, each
//! doubling costing two truncated FFT products.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Truncated product `(a * b) mod z^len`.
pub fn mul_trunc(a: &[f64], b: &[f64], len: usize) -> Vec<f64> {
    let na = a.len().min(len);
    let nb = b.len().min(len);
    if na == 0 || nb == 0 {
        return vec![0.0; len];
    }
    if na.min(nb) <= 32 || (na + nb) <= 256 {
        return mul_direct(&a[..na], &b[..nb], len);
    }
    let full = na + nb - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut fa: Vec<Complex<f64>> = a[..na]
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut fb: Vec<Complex<f64>> = b[..nb]
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / size as f64;
    let mut out = vec![0.0; len];
    for (i, item) in out.iter_mut().enumerate().take(full.min(len)) {
        *item = fa[i].re * scale;
    }
    out
}

fn mul_direct(a: &[f64], b: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (i, &ai) in a.iter().enumerate() {
        if i >= len || ai == 0.0 {
            continue;
        }
        let jmax = (len - i).min(b.len());
        for (j, &bj) in b.iter().enumerate().take(jmax) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Coefficients of `1/Q(z) mod z^n` for `Q(0) = 1`, by Newton doubling.
pub fn series_inverse(q: &[f64], n: usize) -> Vec<f64> {
    assert!(!q.is_empty() && (q[0] - 1.0).abs() < 1e-12, "Q(0) must be 1");
    let mut r = vec![1.0];
    while r.len() < n {
        let m2 = (2 * r.len()).min(n);
        let t = mul_trunc(q, &r, m2);
        let mut two_minus_t = t;
        for x in two_minus_t.iter_mut() {
            *x = -*x;
        }
        two_minus_t[0] += 2.0;
        r = mul_trunc(&r, &two_minus_t, m2);
    }
    r
}
