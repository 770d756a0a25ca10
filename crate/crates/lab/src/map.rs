//! Two-branch interval maps with an indifferent fixed point at the origin.
//!
//! The builtin family is the Liverani-Saussol-Vaienti map
//! `F(x) = x (1 + 2^s x^s)` on `[0, 1/2]`, `F(x) = 2x - 1` on `(1/2, 1]`,
//! which is expanding everywhere except at `x = 0` where `F'(0) = 1`. The
//! first branch behaves like `x + r x^{1+s}` with `r = 2^s` near the origin,
//! so orbits linger there and the first-passage time to the right branch has
//! a polynomial tail. Everything downstream (induced operators, renewal laws,
//! mixing rates) is built from the pieces in this module.

use crate::error::{LabError, Result};
use crate::rng::SplitMix64;

/// Builtin family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Lsv,
}

/// Parameters of a concrete member of the family.
#[derive(Debug, Clone, Copy)]
pub struct MapModel {
    /// Intermittency exponent (`> 0`).
    pub s: f64,
    /// Leading coefficient of `F(x) - x ~ r x^{1+s}` near the origin.
    pub r: f64,
    /// Branch cut point.
    pub q: f64,
    pub kind: MapKind,
}

/// First-passage time, with an explicit overflow flag for orbits that exceed
/// the iteration cap near the indifferent point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Passage {
    Time(usize),
    Overflow,
}

/// One application of the induced map `G = F^tau`.
#[derive(Debug, Clone, Copy)]
pub struct InducedStep {
    pub value: f64,
    pub tau: usize,
    /// Chain-rule derivative `prod_j F'(F^j x)`.
    pub derivative: f64,
}

/// Shared-orbit evaluation of all induced inverse branches at one point.
#[derive(Debug, Clone)]
pub struct InverseBranchTrail {
    /// `points[k-1] = G_k(y)`.
    pub points: Vec<f64>,
    /// `derivs[k-1] = G_k'(y)`.
    pub derivs: Vec<f64>,
}

impl MapModel {
    /// The LSV member with exponent `s` (`q = 1/2`, `r = 2^s`).
    pub fn lsv(s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(LabError::domain(format!(
                "intermittency exponent must be positive, got {s}"
            )));
        }
        Ok(MapModel {
            s,
            r: 2f64.powf(s),
            q: 0.5,
            kind: MapKind::Lsv,
        })
    }

    /// Spec string `lsv:s=<v>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("lsv:") {
            for part in rest.split(',') {
                if let Some(v) = part.trim().strip_prefix("s=") {
                    let s: f64 = v
                        .parse()
                        .map_err(|e| LabError::Parse(format!("bad s value: {e}")))?;
                    return Self::lsv(s);
                }
            }
            return Err(LabError::Parse(format!("missing s= in '{spec}'")));
        }
        Err(LabError::Parse(format!(
            "unknown map spec '{spec}' (expected lsv:s=<v>)"
        )))
    }

    #[inline]
    fn f_left(&self, x: f64) -> f64 {
        x + self.r * x.powf(1.0 + self.s)
    }

    #[inline]
    fn fp_left(&self, x: f64) -> f64 {
        1.0 + self.r * (1.0 + self.s) * x.powf(self.s)
    }

    /// Slope of the (linear) right branch; used wherever a point is known to
    /// be a right-branch preimage, since `x = q` itself belongs to the left
    /// branch in the pointwise evaluation convention.
    #[inline]
    pub fn right_slope(&self) -> f64 {
        1.0 / (1.0 - self.q)
    }

    /// `F(x)` without domain checks; branch chosen by `x <= q`.
    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        if x <= self.q {
            self.f_left(x)
        } else {
            2.0 * x - 1.0
        }
    }

    /// `F'(x)` without domain checks.
    #[inline]
    pub fn f_prime(&self, x: f64) -> f64 {
        if x <= self.q {
            self.fp_left(x)
        } else {
            2.0
        }
    }

    /// Branch evaluation with its derivative.
    pub fn apply(&self, x: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&x) {
            return Err(LabError::domain(format!("x = {x} outside [0, 1]")));
        }
        Ok((self.f(x), self.f_prime(x)))
    }

    /// Inverse branch `F_i`: branch 0 maps `[0,1] -> [0,q]`, branch 1 maps
    /// `[0,1] -> [q,1]`. Root finding is bracketing bisection plus Newton
    /// polish to `|F(x) - y| <= 1e-14`.
    pub fn inverse_branch(&self, branch: u8, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(LabError::domain(format!("y = {y} outside [0, 1]")));
        }
        match branch {
            0 => self.inverse_left(y),
            1 => Ok(self.q + (1.0 - self.q) * y),
            b => Err(LabError::domain(format!("branch index {b} not in {{0, 1}}"))),
        }
    }

    /// Left-branch inverse. `g(x) = x + r x^{1+s} - y` is convex increasing,
    /// so Newton from the right endpoint of the bracket stays inside it; a
    /// bisection step covers any iterate that escapes.
    pub fn inverse_left(&self, y: f64) -> Result<f64> {
        if y == 0.0 {
            return Ok(0.0);
        }
        let mut lo = 0.0f64;
        let mut hi = y.min(self.q);
        let mut x = hi;
        // drive to rounding level: level-set recursions amplify any slack
        let tol = 4.0 * f64::EPSILON * (1.0 + y);
        for _ in 0..200 {
            let g = self.f_left(x) - y;
            if g.abs() <= tol {
                return Ok(x);
            }
            if g > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let step = g / self.fp_left(x);
            let mut next = x - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= f64::EPSILON * x.abs() {
                return Ok(next);
            }
            x = next;
        }
        let residual = (self.f_left(x) - y).abs();
        if residual <= 1e-14 * (1.0 + y) {
            Ok(x)
        } else {
            Err(LabError::numerical(
                format!("left inverse branch did not converge at y = {y}"),
                residual,
            ))
        }
    }

    /// First-passage time `tau(x)`: the smallest `n >= 1` with
    /// `F^{n-1}(x)` in the right branch interval `(q, 1]`.
    pub fn first_passage(&self, x: f64, cap: usize) -> Result<Passage> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(LabError::domain(format!(
                "first passage undefined at x = {x} (needs x in (0, 1])"
            )));
        }
        let mut u = x;
        for n in 1..=cap {
            if u > self.q {
                return Ok(Passage::Time(n));
            }
            u = self.f_left(u);
        }
        Ok(Passage::Overflow)
    }

    /// Induced map `G(x) = F^{tau(x)}(x)` with its chain-rule derivative.
    pub fn induced_apply(&self, x: f64, cap: usize) -> Result<InducedStep> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(LabError::domain(format!(
                "induced map undefined at x = {x} (needs x in (0, 1])"
            )));
        }
        let mut u = x;
        let mut deriv = 1.0;
        for n in 1..=cap {
            if u > self.q {
                deriv *= self.right_slope();
                return Ok(InducedStep {
                    value: self.right_slope() * (u - self.q),
                    tau: n,
                    derivative: deriv,
                });
            }
            deriv *= self.fp_left(u);
            u = self.f_left(u);
        }
        Err(LabError::Resource(format!(
            "first passage exceeded cap {cap} at x = {x}"
        )))
    }

    /// Induced inverse branch `G_k = F_0^{k-1} . F_1` mapping `[0,1]` into the
    /// closure of the level set `A_k`, with its derivative.
    pub fn induced_inverse_branch(&self, k: usize, y: f64) -> Result<(f64, f64)> {
        if k == 0 {
            return Err(LabError::domain("induced branch index starts at 1"));
        }
        if !(0.0..=1.0).contains(&y) {
            return Err(LabError::domain(format!("y = {y} outside [0, 1]")));
        }
        let mut u = self.inverse_branch(1, y)?;
        let mut deriv = 1.0 / self.right_slope();
        for _ in 1..k {
            u = self.inverse_left(u)?;
            deriv /= self.fp_left(u);
        }
        Ok((u, deriv))
    }

    /// All induced inverse branches `G_1(y)..G_{k_max}(y)` sharing one
    /// backward orbit, one root solve per extra branch.
    pub fn inverse_branch_trail(&self, y: f64, k_max: usize) -> Result<InverseBranchTrail> {
        if !(0.0..=1.0).contains(&y) {
            return Err(LabError::domain(format!("y = {y} outside [0, 1]")));
        }
        let mut points = Vec::with_capacity(k_max);
        let mut derivs = Vec::with_capacity(k_max);
        let mut u = self.inverse_branch(1, y)?;
        let mut d = 1.0 / self.right_slope();
        points.push(u);
        derivs.push(d);
        for _ in 1..k_max {
            u = self.inverse_left(u)?;
            d /= self.fp_left(u);
            points.push(u);
            derivs.push(d);
        }
        Ok(InverseBranchTrail { points, derivs })
    }

    /// Symbolic coding: `w_j = 1` iff `F^j(x) > q`.
    pub fn coding(&self, x: f64, n: usize) -> Result<Vec<u8>> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(LabError::domain(format!(
                "coding undefined at x = {x} (needs x in (0, 1])"
            )));
        }
        let mut word = Vec::with_capacity(n);
        let mut u = x;
        for _ in 0..n {
            word.push(u8::from(u > self.q));
            u = self.f(u).clamp(0.0, 1.0);
        }
        Ok(word)
    }
}

/// Level-set geometry: `x_n = F_0^n(1)` and the partition intervals
/// `A_n = (x_n, x_{n-1}]`.
#[derive(Debug, Clone)]
pub struct BranchGeometry {
    /// `endpoints[n] = x_n`, `endpoints[0] = 1`.
    endpoints: Vec<f64>,
}

impl BranchGeometry {
    pub fn n_max(&self) -> usize {
        self.endpoints.len() - 1
    }

    /// `x_n`.
    pub fn endpoint(&self, n: usize) -> f64 {
        self.endpoints[n]
    }

    pub fn endpoints(&self) -> &[f64] {
        &self.endpoints
    }

    /// `|A_n| = x_{n-1} - x_n`, `n >= 1`.
    pub fn length(&self, n: usize) -> f64 {
        self.endpoints[n - 1] - self.endpoints[n]
    }

    /// Midpoint of `A_n`.
    pub fn midpoint(&self, n: usize) -> f64 {
        0.5 * (self.endpoints[n - 1] + self.endpoints[n])
    }

    /// The level `n` with `x` in `(x_n, x_{n-1}]`, or `None` when `x` is
    /// deeper than the computed range.
    pub fn level_of(&self, x: f64) -> Option<usize> {
        if x > 1.0 || x <= *self.endpoints.last().unwrap() {
            return None;
        }
        // endpoints are strictly decreasing
        let mut lo = 0usize;
        let mut hi = self.endpoints.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x > self.endpoints[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }
}

/// Builds the level sets by backward recursion `x_n = F_0(x_{n-1})` from
/// `x_0 = 1`; forward compositions would amplify error near the indifferent
/// point.
pub fn level_sets(m: &MapModel, n_max: usize) -> Result<BranchGeometry> {
    if n_max < 1 {
        return Err(LabError::domain("n_max must be at least 1"));
    }
    let mut endpoints = Vec::with_capacity(n_max + 1);
    endpoints.push(1.0);
    let mut x = 1.0;
    for n in 1..=n_max {
        let next = m.inverse_left(x)?;
        if !(next > 0.0 && next < x) {
            return Err(LabError::numerical(
                format!("level endpoints lost monotonicity at n = {n}"),
                next,
            ));
        }
        endpoints.push(next);
        x = next;
    }
    Ok(BranchGeometry { endpoints })
}

/// Sup of `|log G'(x) - log G'(y)|` over sampled pairs sharing the same
/// induced word of each depth `0..=ell`. Words are drawn with level-set
/// weights `~ k^{-(1+1/s)}` (uniform symbols would make deep words contract
/// below float resolution long before interesting depths). The sequence over
/// depths contracts geometrically.
pub fn distortion_check(
    m: &MapModel,
    ell: usize,
    n_samples: usize,
    k_cutoff: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut sups = vec![0.0f64; ell + 1];
    let mut rng = SplitMix64::new(seed);
    let cap = 10 * k_cutoff + 64;
    // inverse-CDF table for the symbol weights
    let mut cum = Vec::with_capacity(k_cutoff);
    let mut acc = 0.0;
    for k in 1..=k_cutoff {
        acc += (k as f64).powf(-(1.0 + 1.0 / m.s));
        cum.push(acc);
    }
    let total = acc;
    let draw = |rng: &mut SplitMix64| -> usize {
        let u = rng.next_f64() * total;
        match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => (i + 1).min(k_cutoff),
        }
    };
    for (depth, sup) in sups.iter_mut().enumerate() {
        for _ in 0..n_samples {
            let word: Vec<usize> = (0..=depth).map(|_| draw(&mut rng)).collect();
            let u = rng.next_f64();
            let v = rng.next_f64();
            let mut x = u;
            let mut y = v;
            for &k in word.iter().rev() {
                x = m.induced_inverse_branch(k, x)?.0;
                y = m.induced_inverse_branch(k, y)?.0;
            }
            let gx = m.induced_apply(x, cap)?;
            let gy = m.induced_apply(y, cap)?;
            debug_assert_eq!(gx.tau, word[0]);
            let gap = (gx.derivative.ln() - gy.derivative.ln()).abs();
            if gap > *sup {
                *sup = gap;
            }
        }
    }
    Ok(sups)
}
