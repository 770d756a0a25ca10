//! Renewal-sequence arithmetic for an arbitrary return-time law.
//!
//! Given a law `{p_n}`, the renewal sequence is generated by
//! `a_0 = 1`, `a_n = p_n + a_1 p_{n-1} + ... + a_{n-1} p_1`;
//! its generating function is `A(z) = (1 - sum p_n z^n)^{-1}`. Tail sums
//! `d_n = sum_{k>n} p_k` satisfy `(1-z) D(z) A(z) = 1`, which doubles as the
//! main exactness check: `sum_{k<=n} d_k a_{n-k} = 1` for every `n`.

mod fftconv;

use crate::error::{LabError, Result};
use crate::fit::{fit_exponent, ExponentFit};
use crate::tail::{power_tail_sum, MomentTable, TailLaw};

pub use crate::fit::fit_exponent as fit_exponent_over;

/// Horizon above which the convolution switches from the direct recurrence to
/// FFT-backed Newton inversion.
pub const DIRECT_LIMIT: usize = 1 << 15;

/// A renewal sequence with its first moment and optional centered version.
#[derive(Debug, Clone)]
pub struct RenewalSeq {
    /// `a_0..a_n_max`.
    pub a: Vec<f64>,
    /// First moment of the law (`None` when infinite).
    pub m1: Option<f64>,
    /// `b_n = M_1 a_n - 1`, filled by [`RenewalSeq::with_b`].
    pub b: Option<Vec<f64>>,
}

/// Ergodic-degree classification of a return-time law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErgodicDegree {
    /// All moments of the declared tail up to `d+1` diverge marginally:
    /// `M_{d+1} = inf`, `M_{d+1-eps} < inf`.
    Finite(f64),
    /// Every moment is finite (explicit law or sub-power tail).
    InfiniteDegree,
    /// A slowly varying correction was detected; the degree need not exist.
    Undefined,
}

fn validate(law: &TailLaw) -> Result<()> {
    // TailLaw construction already enforces the invariants; re-check mass so
    // hand-mutated laws cannot slip through via deserialization paths.
    let explicit: f64 = law.explicit_probs().iter().sum();
    if explicit > 1.0 + crate::tail::MASS_SLACK {
        return Err(LabError::InvalidTail(format!(
            "explicit mass {explicit} exceeds 1"
        )));
    }
    Ok(())
}

#[inline]
fn neumaier_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

/// Blocked compensated convolution term `sum_{j=lo}^{n-1} a_j p_{n-j}`.
fn conv_term(a: &[f64], p: &[f64], n: usize, lo: usize) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut block = 0.0;
    let mut in_block = 0usize;
    for j in lo..n {
        block += a[j] * p[n - j];
        in_block += 1;
        if in_block == 256 {
            neumaier_add(&mut sum, &mut comp, block);
            block = 0.0;
            in_block = 0;
        }
    }
    neumaier_add(&mut sum, &mut comp, block);
    sum + comp
}

/// Direct `O(n * support)` evaluation of the recurrence.
pub fn renewal_sequence_direct(law: &TailLaw, n_max: usize) -> Result<RenewalSeq> {
    validate(law)?;
    if n_max < 1 {
        return Err(LabError::domain("n_max must be at least 1"));
    }
    let p = law.materialize(n_max);
    let support = if law.tail_descriptor().is_some() {
        n_max
    } else {
        law.k().min(n_max)
    };
    let mut a = vec![0.0; n_max + 1];
    a[0] = 1.0;
    for n in 1..=n_max {
        let lo = n.saturating_sub(support);
        a[n] = conv_term(&a, &p, n, lo);
    }
    Ok(RenewalSeq {
        a,
        m1: law.first_moment(),
        b: None,
    })
}

/// FFT route: coefficients of `1/(1 - P(z))` by Newton inversion.
pub fn renewal_sequence_fft(law: &TailLaw, n_max: usize) -> Result<RenewalSeq> {
    validate(law)?;
    if n_max < 1 {
        return Err(LabError::domain("n_max must be at least 1"));
    }
    let p = law.materialize(n_max);
    let mut q = vec![0.0; n_max + 1];
    q[0] = 1.0;
    for (n, item) in q.iter_mut().enumerate().skip(1) {
        *item = -p[n];
    }
    let a = fftconv::series_inverse(&q, n_max + 1);
    Ok(RenewalSeq {
        a,
        m1: law.first_moment(),
        b: None,
    })
}

/// Renewal sequence `a_0..a_{n_max}`: direct recurrence up to the block-FFT
/// threshold, Newton inversion beyond it.
pub fn renewal_sequence(law: &TailLaw, n_max: usize) -> Result<RenewalSeq> {
    if n_max <= DIRECT_LIMIT {
        renewal_sequence_direct(law, n_max)
    } else {
        renewal_sequence_fft(law, n_max)
    }
}

/// Tail sums `d_n = sum_{k>n} p_k` and iterated tails
/// `d1_n = sum_{l>n} d_l = mu(tau > n+1)`, for `n = 0..n_max`.
///
/// For infinite-mean laws every `d1_n` is infinite.
pub fn tail_sums(law: &TailLaw, n_max: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    validate(law)?;
    let mut d = vec![0.0; n_max + 1];
    d[n_max] = law.mass_beyond(n_max);
    let p = law.materialize(n_max);
    for n in (0..n_max).rev() {
        d[n] = d[n + 1] + p[n + 1];
    }
    let mut d1 = vec![0.0; n_max + 1];
    d1[n_max] = iterated_tail_beyond(law, n_max);
    if d1[n_max].is_finite() {
        for n in (0..n_max).rev() {
            d1[n] = d1[n + 1] + d[n + 1];
        }
    } else {
        for item in d1.iter_mut() {
            *item = f64::INFINITY;
        }
    }
    Ok((d, d1))
}

/// `sum_{l > n} d_l = sum_{k > n+1} (k - n - 1) p_k`, analytic through the
/// declared tail.
fn iterated_tail_beyond(law: &TailLaw, n: usize) -> f64 {
    let k = law.k();
    let mut s = 0.0;
    for j in (n + 2)..=k {
        s += (j - n - 1) as f64 * law.p(j);
    }
    if let Some(t) = law.tail_descriptor() {
        if t.alpha <= 2.0 {
            return f64::INFINITY;
        }
        let from = k.max(n + 1) + 1;
        let first = t.c * power_tail_sum(t.alpha - 1.0, from);
        let zeroth = t.c * power_tail_sum(t.alpha, from);
        s += first - (n + 1) as f64 * zeroth;
    }
    s
}

/// `mu(tau > n)` for `n >= 1`: the iterated tail `sum_{l >= n} d_l`.
pub fn mu_tau_gt(law: &TailLaw, n: usize) -> f64 {
    assert!(n >= 1);
    iterated_tail_beyond(law, n - 1)
}

/// Centered sequence `b_n = M_1 a_n - 1`. Fails for infinite-mean laws.
pub fn b_sequence(seq: &RenewalSeq) -> Result<Vec<f64>> {
    let m1 = seq.m1.ok_or_else(|| {
        LabError::Unsupported("b_n = M_1 a_n - 1 needs finite M_1 (infinite M_1)".into())
    })?;
    Ok(seq.a.iter().map(|&a| m1 * a - 1.0).collect())
}

impl RenewalSeq {
    /// Fills the centered copy in place.
    pub fn with_b(mut self) -> Result<Self> {
        self.b = Some(b_sequence(&self)?);
        Ok(self)
    }
}

/// Moment `M_gamma(z)`; thin wrapper kept for the module's operation surface.
pub fn moment(law: &TailLaw, gamma: f64, z: f64) -> Result<MomentTable> {
    validate(law)?;
    law.moment(gamma, z)
}

/// Pointwise generating-function values at `z` in `[0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct GfEval {
    pub z: f64,
    /// `A(z) = (1 - sum p_n z^n)^{-1}`.
    pub a: f64,
    /// `D(z) = sum d_n z^n`.
    pub d: f64,
    /// `D1(z) = sum d1_n z^n` (infinite for infinite-mean laws).
    pub d1: f64,
    /// `B(z) = D1(z)/D(z)` when the mean is finite.
    pub b: Option<f64>,
    /// `|(1-z) D(z) A(z) - 1|`.
    pub identity_residual: f64,
}

/// Evaluates `A, B, D, D1` at a point of `[0, 1)`.
///
/// `D` and `D1` are summed coefficient-wise (with periodic analytic
/// re-anchoring of the tail sums), so the returned identity residual is a real
/// consistency check rather than an algebraic tautology.
pub fn gf_eval(law: &TailLaw, z: f64) -> Result<GfEval> {
    validate(law)?;
    if !(0.0..1.0).contains(&z) {
        return Err(LabError::domain(format!(
            "generating functions are evaluated on [0, 1), got z = {z}"
        )));
    }
    let p_of_z = if z == 0.0 {
        0.0
    } else {
        law.moment(0.0, z)?.value
    };
    let a = 1.0 / (1.0 - p_of_z);

    // D(z) and D1(z) by direct series summation.
    let finite_mean = law.first_moment().is_some();
    let mut d_n = law.mass_beyond(0);
    let mut d1_n = if finite_mean {
        iterated_tail_beyond(law, 0)
    } else {
        f64::INFINITY
    };
    let mut d_acc = d_n; // n = 0 term
    let mut d1_acc = d1_n;
    let mut zn = 1.0;
    let mut n = 0usize;
    if z > 0.0 {
        loop {
            n += 1;
            zn *= z;
            if n % 4096 == 0 {
                // re-anchor to stop subtraction drift on long slow tails
                d_n = law.mass_beyond(n - 1);
                if finite_mean {
                    d1_n = iterated_tail_beyond(law, n - 1);
                }
            }
            d_n -= law.p(n);
            let term_d = d_n * zn;
            d_acc += term_d;
            if finite_mean {
                d1_n -= d_n;
                d1_acc += d1_n * zn;
            }
            let bound = (d_n.max(if finite_mean { d1_n } else { 0.0 })) * zn * z / (1.0 - z);
            if bound <= 1e-16 * d_acc.abs().max(1.0) && n > 8 {
                break;
            }
            if n > 100_000_000 {
                return Err(LabError::numerical(
                    format!("D(z) series did not settle at z = {z}"),
                    bound,
                ));
            }
        }
    }
    let b = if finite_mean {
        Some(d1_acc / d_acc)
    } else {
        None
    };
    let identity_residual = ((1.0 - z) * d_acc * a - 1.0).abs();
    Ok(GfEval {
        z,
        a,
        d: d_acc,
        d1: d1_acc,
        b,
        identity_residual,
    })
}

/// Classifies the ergodic degree of a law.
///
/// A declared power tail is authoritative: `d = alpha - 2`. An explicit law
/// is `InfiniteDegree` unless its trailing atoms match a power law with a
/// statistically significant `(log n)^g` correction, in which case the degree
/// need not exist and `Undefined` is returned.
pub fn ergodic_degree(law: &TailLaw) -> Result<ErgodicDegree> {
    validate(law)?;
    if let Some(t) = law.tail_descriptor() {
        return Ok(ErgodicDegree::Finite(t.alpha - 2.0));
    }
    let k = law.k();
    if k >= 40 {
        let lo = (k / 10).max(3);
        if let Some(fitres) = log_corrected_fit(law, lo, k) {
            let (g, se_g, rms) = fitres;
            if rms < 0.05 && g.abs() > 0.5 && g.abs() > 4.0 * se_g {
                return Ok(ErgodicDegree::Undefined);
            }
        }
    }
    Ok(ErgodicDegree::InfiniteDegree)
}

/// Least squares of `ln p_n = c0 + b ln n + g ln ln n` over `[lo, hi]`.
/// Returns `(g, stderr_g, rms_residual)`, or `None` if unusable.
fn log_corrected_fit(law: &TailLaw, lo: usize, hi: usize) -> Option<(f64, f64, f64)> {
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for n in lo..=hi {
        let p = law.p(n);
        if !(p > 0.0) || n < 3 {
            return None;
        }
        let x = n as f64;
        rows.push([1.0, x.ln(), x.ln().ln()]);
        ys.push(p.ln());
    }
    let m = rows.len();
    if m < 20 {
        return None;
    }
    // normal equations
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (r, &y) in rows.iter().zip(ys.iter()) {
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
            aty[i] += r[i] * y;
        }
    }
    let inv = invert3(&ata)?;
    let mut beta = [0.0f64; 3];
    for i in 0..3 {
        for j in 0..3 {
            beta[i] += inv[i][j] * aty[j];
        }
    }
    let mut ssr = 0.0;
    for (r, &y) in rows.iter().zip(ys.iter()) {
        let pred = beta[0] * r[0] + beta[1] * r[1] + beta[2] * r[2];
        ssr += (y - pred) * (y - pred);
    }
    let dof = (m as f64 - 3.0).max(1.0);
    let sigma2 = ssr / dof;
    let se_g = (sigma2 * inv[2][2]).max(0.0).sqrt();
    Some((beta[2], se_g, (ssr / m as f64).sqrt()))
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(out)
}

/// Exponent fit over an index window of a sequence (re-export of the shared
/// fitter with the module's argument order).
pub fn fit_exponent_window(seq: &[f64], n_lo: usize, n_hi: usize) -> Result<ExponentFit> {
    fit_exponent(seq, n_lo, n_hi)
}

/// Max over `n <= n_max` of `|sum_{k<=n} d_k a_{n-k} - 1|`, evaluated with the
/// FFT product so the check is cheap even at large horizons.
pub fn renewal_identity_residual(d: &[f64], a: &[f64], n_max: usize) -> f64 {
    let conv = fftconv::mul_trunc(&d[..=n_max.min(d.len() - 1)], &a[..=n_max.min(a.len() - 1)], n_max + 1);
    conv.iter()
        .map(|&x| (x - 1.0).abs())
        .fold(0.0f64, f64::max)
}
