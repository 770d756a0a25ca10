//! Least-squares exponent fits on log-log axes.
//!
//! Asymptotic statements of the form `value ~ C n^d` are tested by fitting
//! `log(value)` against `log(n)` over a window and comparing the slope.

use crate::error::{LabError, Result};

/// Result of a log-log least-squares fit.
#[derive(Debug, Clone, Copy)]
pub struct ExponentFit {
    /// Fitted exponent (slope in log-log coordinates).
    pub slope: f64,
    /// Fitted log-prefactor (intercept in log-log coordinates).
    pub intercept: f64,
    /// Window of indices used, inclusive.
    pub window: (usize, usize),
    /// Standard error of the slope.
    pub stderr: f64,
    /// Coefficient of determination.
    pub r_squared: f64,
    /// Number of sample points used.
    pub n_points: usize,
}

/// Picks at least 20 logarithmically spaced indices in `[n_lo, n_hi]`.
fn log_spaced_indices(n_lo: usize, n_hi: usize, target: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(target);
    let (a, b) = ((n_lo as f64).ln(), (n_hi as f64).ln());
    for i in 0..target {
        let t = if target == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (target - 1) as f64
        };
        idx.push(t.exp().round() as usize);
    }
    idx.dedup();
    idx
}

/// Fits `log seq[n] = intercept + slope * log n` over the index window.
///
/// `seq[n]` is addressed directly, so `seq` must extend at least to `n_hi`.
/// All sampled values must be strictly positive.
pub fn fit_exponent(seq: &[f64], n_lo: usize, n_hi: usize) -> Result<ExponentFit> {
    if n_lo == 0 || n_lo >= n_hi {
        return Err(LabError::domain(format!(
            "fit window [{n_lo}, {n_hi}] must satisfy 0 < n_lo < n_hi"
        )));
    }
    if n_hi >= seq.len() {
        return Err(LabError::domain(format!(
            "fit window end {n_hi} exceeds sequence length {}",
            seq.len()
        )));
    }
    if n_hi - n_lo + 1 < 20 {
        return Err(LabError::domain(format!(
            "fit window [{n_lo}, {n_hi}] holds fewer than 20 integer points"
        )));
    }
    let target = (n_hi - n_lo + 1).min(200).max(20);
    let idx = log_spaced_indices(n_lo, n_hi, target);
    fit_exponent_at(seq, &idx, (n_lo, n_hi))
}

/// Fit at explicitly chosen indices. Used internally and by diagnostics that
/// already have their own sampling.
pub fn fit_exponent_at(seq: &[f64], idx: &[usize], window: (usize, usize)) -> Result<ExponentFit> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &n in idx {
        let v = seq[n];
        if !(v > 0.0) {
            return Err(LabError::domain(format!(
                "fit requires strictly positive values, got {v} at n = {n}"
            )));
        }
        xs.push((n as f64).ln());
        ys.push(v.ln());
    }
    linear_fit(&xs, &ys, window)
}

fn linear_fit(xs: &[f64], ys: &[f64], window: (usize, usize)) -> Result<ExponentFit> {
    let m = xs.len();
    if m < 20 {
        return Err(LabError::domain(format!(
            "fit uses {m} points, needs at least 20"
        )));
    }
    let mf = m as f64;
    let xbar = xs.iter().sum::<f64>() / mf;
    let ybar = ys.iter().sum::<f64>() / mf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..m {
        let dx = xs[i] - xbar;
        let dy = ys[i] - ybar;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(LabError::domain("degenerate fit window (single abscissa)"));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut ssr = 0.0;
    for i in 0..m {
        let r = ys[i] - (intercept + slope * xs[i]);
        ssr += r * r;
    }
    let stderr = if m > 2 {
        (ssr / (m as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    Ok(ExponentFit {
        slope,
        intercept,
        window,
        stderr,
        r_squared,
        n_points: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_recovers_exponent() {
        let seq: Vec<f64> = (0..2000).map(|n| (n.max(1) as f64).powi(-2)).collect();
        let f = fit_exponent(&seq, 10, 1999).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-9, "slope {}", f.slope);
        assert!(f.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn corrected_power_law_within_tolerance() {
        let seq: Vec<f64> = (0..10_001)
            .map(|n| {
                let x = n.max(1) as f64;
                5.0 * x.powf(-0.5) * (1.0 + 0.1 / x)
            })
            .collect();
        let f = fit_exponent(&seq, 1000, 10_000).unwrap();
        assert!((f.slope + 0.5).abs() < 0.01, "slope {}", f.slope);
    }

    #[test]
    fn constant_sequence_has_zero_slope() {
        let seq = vec![3.5; 500];
        let f = fit_exponent(&seq, 10, 499).unwrap();
        assert!(f.slope.abs() < 1e-12);
    }

    #[test]
    fn nonpositive_values_rejected() {
        // a run of zeros cannot be skipped by the log-spaced sampling
        let mut seq = vec![1.0; 100];
        for v in seq[40..=60].iter_mut() {
            *v = 0.0;
        }
        assert!(fit_exponent(&seq, 10, 99).is_err());
    }

    #[test]
    fn tiny_window_rejected() {
        let seq = vec![1.0; 100];
        assert!(fit_exponent(&seq, 10, 15).is_err());
    }
}
