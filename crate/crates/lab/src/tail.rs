//! Return-time laws.
//!
//! A [`TailLaw`] is a finite list of atoms `p_1..p_K`, optionally extended
//! beyond `K` by a declared analytic power tail `p_n = c n^{-alpha}`. The tail
//! exponent is what drives every asymptotic statement downstream, so tail
//! sums, moments and generating-function evaluations are computed with the
//! analytic continuation rather than by brute truncation.

use crate::error::{LabError, Result};

/// Slack accepted on the explicit-mass bound `sum p_n <= 1`.
pub const MASS_SLACK: f64 = 1e-12;
/// Tolerance for the `normalized` classification.
pub const NORMALIZED_TOL: f64 = 1e-9;

/// Declared analytic tail `p_n = c n^{-alpha}` for `n > K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTail {
    pub alpha: f64,
    pub c: f64,
}

/// A return-time distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TailLaw {
    /// Explicit atoms, `probs[i] = p_{i+1}`.
    probs: Vec<f64>,
    tail: Option<PowerTail>,
    normalized: bool,
}

/// `sum_{n >= from} n^{-a}` for `a > 1`, by explicit summation of the first
/// block and an Euler-Maclaurin closure of the remainder.
pub fn power_tail_sum(a: f64, from: usize) -> f64 {
    assert!(a > 1.0, "power_tail_sum needs exponent > 1, got {a}");
    let from = from.max(1);
    let n_switch = from + 64;
    let mut s = 0.0;
    for n in from..n_switch {
        s += (n as f64).powf(-a);
    }
    s + euler_maclaurin_tail(a, n_switch as f64)
}

/// Euler-Maclaurin tail `sum_{n >= big_n} n^{-a}` with `big_n` large enough
/// that the truncated correction terms are below double precision.
fn euler_maclaurin_tail(a: f64, big_n: f64) -> f64 {
    let inv = big_n.powf(-a);
    let integral = big_n.powf(1.0 - a) / (a - 1.0);
    let t1 = inv / 2.0;
    let t2 = a * inv / big_n / 12.0;
    let t3 = a * (a + 1.0) * (a + 2.0) * inv / big_n.powi(3) / 720.0;
    let t4 = a * (a + 1.0) * (a + 2.0) * (a + 3.0) * (a + 4.0) * inv / big_n.powi(5) / 30240.0;
    integral + t1 + t2 - t3 + t4
}

/// `sum_{n >= from} z^n n^{-a}` for `0 <= z < 1` (any real `a`), summed until
/// the geometric remainder bound drops below the working precision.
pub fn power_tail_sum_z(a: f64, from: usize, z: f64) -> Result<f64> {
    assert!((0.0..1.0).contains(&z));
    if z == 0.0 {
        return Ok(0.0);
    }
    let from = from.max(1);
    let mut acc = 0.0f64;
    let mut n = from;
    let mut zn = z.powi(from as i32);
    let geo = z / (1.0 - z);
    loop {
        let term = zn * (n as f64).powf(-a);
        acc += term;
        // remaining terms are bounded by term * z/(1-z) once n^-a is decreasing
        if term * geo <= acc.abs() * 1e-17 + 1e-300 && n > from + 8 {
            return Ok(acc);
        }
        n += 1;
        zn *= z;
        if n > from + 200_000_000 {
            return Err(LabError::numerical(
                format!("series sum_{{n}} z^n n^-{a} did not settle (z = {z})"),
                term,
            ));
        }
    }
}

/// Moment `M_gamma(z) = sum_k z^k k^gamma p_k`.
#[derive(Debug, Clone, Copy)]
pub struct MomentTable {
    pub gamma: f64,
    pub z: f64,
    /// The value; meaningful only when `finite` is set.
    pub value: f64,
    pub finite: bool,
}

impl TailLaw {
    /// Law with explicit atoms only.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        Self::build(probs, None)
    }

    /// Law with explicit atoms and a declared power tail. `c = None` asks for
    /// the constant that normalizes total mass to 1.
    pub fn with_power_tail(probs: Vec<f64>, alpha: f64, c: Option<f64>) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(LabError::InvalidTail(format!(
                "tail exponent must exceed 1, got {alpha}"
            )));
        }
        let k = probs.len();
        let explicit: f64 = probs.iter().sum();
        let c = match c {
            Some(c) if c > 0.0 => c,
            Some(c) => {
                return Err(LabError::InvalidTail(format!(
                    "tail constant must be positive, got {c}"
                )))
            }
            None => {
                let residual = 1.0 - explicit;
                if residual <= 0.0 {
                    return Err(LabError::InvalidTail(
                        "auto tail constant needs explicit mass < 1".into(),
                    ));
                }
                residual / power_tail_sum(alpha, k + 1)
            }
        };
        Self::build(probs, Some(PowerTail { alpha, c }))
    }

    fn build(probs: Vec<f64>, tail: Option<PowerTail>) -> Result<Self> {
        if probs.is_empty() && tail.is_none() {
            return Err(LabError::InvalidTail("law has no atoms".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(LabError::InvalidTail(format!(
                    "p_{} = {p} is not a nonnegative real",
                    i + 1
                )));
            }
        }
        let explicit: f64 = probs.iter().sum();
        if explicit > 1.0 + MASS_SLACK {
            return Err(LabError::InvalidTail(format!(
                "explicit mass {explicit} exceeds 1"
            )));
        }
        let tail_mass = tail
            .as_ref()
            .map(|t| t.c * power_tail_sum(t.alpha, probs.len() + 1))
            .unwrap_or(0.0);
        let total = explicit + tail_mass;
        if total > 1.0 + 1e-9 {
            return Err(LabError::InvalidTail(format!(
                "total mass {total} exceeds 1"
            )));
        }
        let normalized = (total - 1.0).abs() <= NORMALIZED_TOL;
        Ok(TailLaw {
            probs,
            tail,
            normalized,
        })
    }

    /// Geometric law `p_n = q (1-q)^{n-1}`, mean `1/q`, materialized until the
    /// dropped mass is below 1e-18.
    pub fn geometric(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(LabError::InvalidTail(format!(
                "geometric parameter must lie in (0,1), got {q}"
            )));
        }
        let k = ((1e-18f64).ln() / (1.0 - q).ln()).ceil() as usize;
        let mut probs = Vec::with_capacity(k);
        let mut p = q;
        for _ in 0..k {
            probs.push(p);
            p *= 1.0 - q;
        }
        Self::build(probs, None)
    }

    /// Pure power law `p_n = n^{-alpha} / zeta(alpha)`: 64 explicit atoms plus
    /// the declared tail with the normalizing constant.
    pub fn power(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(LabError::InvalidTail(format!(
                "power law exponent must exceed 1, got {alpha}"
            )));
        }
        let c = 1.0 / power_tail_sum(alpha, 1);
        let probs: Vec<f64> = (1..=64).map(|n| c * (n as f64).powf(-alpha)).collect();
        Self::build(probs, Some(PowerTail { alpha, c }))
    }

    /// The two-atom law `p = (1/2, 1/2)`.
    pub fn uniform2() -> Self {
        Self::build(vec![0.5, 0.5], None).expect("uniform2 is valid")
    }

    /// Builtin spec strings: `geometric:q=<v>`, `power:alpha=<v>`, `uniform2`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "uniform2" {
            return Ok(Self::uniform2());
        }
        if let Some(rest) = spec.strip_prefix("geometric:") {
            let q = parse_kv(rest, "q")?;
            return Self::geometric(q);
        }
        if let Some(rest) = spec.strip_prefix("power:") {
            let alpha = parse_kv(rest, "alpha")?;
            return Self::power(alpha);
        }
        Err(LabError::Parse(format!(
            "unknown tail law spec '{spec}' (expected geometric:q=, power:alpha= or uniform2)"
        )))
    }

    /// Number of explicit atoms.
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn tail_descriptor(&self) -> Option<PowerTail> {
        self.tail
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn explicit_probs(&self) -> &[f64] {
        &self.probs
    }

    /// `p_n` for `n >= 1`, extrapolating through the declared tail.
    pub fn p(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        if n <= self.probs.len() {
            self.probs[n - 1]
        } else if let Some(t) = self.tail {
            t.c * (n as f64).powf(-t.alpha)
        } else {
            0.0
        }
    }

    /// `p_1..p_{n_max}` as a vector indexed by `n` (`v[0] = 0`).
    pub fn materialize(&self, n_max: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_max + 1];
        for (i, &p) in self.probs.iter().enumerate() {
            if i + 1 <= n_max {
                v[i + 1] = p;
            }
        }
        if let Some(t) = self.tail {
            for (n, item) in v.iter_mut().enumerate().take(n_max + 1).skip(self.probs.len() + 1) {
                *item = t.c * (n as f64).powf(-t.alpha);
            }
        }
        v
    }

    /// Total mass including the analytic tail.
    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum::<f64>() + self.declared_tail_mass()
    }

    /// Mass carried by the declared tail beyond the explicit atoms.
    pub fn declared_tail_mass(&self) -> f64 {
        self.tail
            .map(|t| t.c * power_tail_sum(t.alpha, self.probs.len() + 1))
            .unwrap_or(0.0)
    }

    /// `sum_{k > n} p_k`, analytic beyond the explicit support.
    pub fn mass_beyond(&self, n: usize) -> f64 {
        let k = self.probs.len();
        let analytic = |from: usize| -> f64 {
            self.tail
                .map(|t| t.c * power_tail_sum(t.alpha, from))
                .unwrap_or(0.0)
        };
        if n >= k {
            analytic(n + 1)
        } else {
            let explicit: f64 = self.probs[n..].iter().sum();
            explicit + analytic(k + 1)
        }
    }

    /// First moment `M_1 = sum k p_k`, `None` when infinite.
    pub fn first_moment(&self) -> Option<f64> {
        match self.tail {
            Some(t) if t.alpha <= 2.0 => None,
            _ => Some(self.moment(1.0, 1.0).expect("z = 1 is valid").value),
        }
    }

    /// `M_gamma(z) = sum_k z^k k^gamma p_k` with tail extrapolation.
    ///
    /// At `z = 1` the result is flagged non-finite when the extrapolated
    /// series diverges (declared tail with `gamma >= alpha - 1`).
    pub fn moment(&self, gamma: f64, z: f64) -> Result<MomentTable> {
        if !(gamma >= 0.0) {
            return Err(LabError::domain(format!(
                "moment order must be nonnegative, got {gamma}"
            )));
        }
        if !(z > 0.0 && z <= 1.0) {
            return Err(LabError::domain(format!(
                "moment evaluation point must lie in (0, 1], got {z}"
            )));
        }
        let k = self.probs.len();
        let mut value = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            let n = (i + 1) as f64;
            value += z.powi((i + 1) as i32) * n.powf(gamma) * p;
        }
        let mut finite = true;
        if let Some(t) = self.tail {
            let a = t.alpha - gamma;
            if z == 1.0 {
                if a > 1.0 {
                    value += t.c * power_tail_sum(a, k + 1);
                } else {
                    finite = false;
                    value = f64::INFINITY;
                }
            } else {
                value += t.c * power_tail_sum_z(a, k + 1, z)?;
            }
        }
        Ok(MomentTable {
            gamma,
            z,
            value,
            finite,
        })
    }
}

fn parse_kv(rest: &str, key: &str) -> Result<f64> {
    for part in rest.split(',') {
        if let Some((k, v)) = part.split_once('=') {
            if k.trim() == key {
                return v
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("bad value for {key}: {e}")));
            }
        }
    }
    Err(LabError::Parse(format!("missing {key}= in '{rest}'")))
}

/// Reads the CSV interchange format: header `n,p`, one row per atom, optional
/// trailing comment `# tail: alpha=<v>,c=<v|auto>`.
pub fn read_tail_csv(text: &str) -> Result<TailLaw> {
    let mut probs: Vec<(usize, f64)> = Vec::new();
    let mut tail_spec: Option<(f64, Option<f64>)> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(spec) = rest.strip_prefix("tail:") {
                let alpha = parse_kv(spec, "alpha")?;
                let c_raw = spec
                    .split(',')
                    .find_map(|p| p.trim().strip_prefix("c=").map(str::trim));
                let c = match c_raw {
                    None | Some("auto") => None,
                    Some(v) => Some(v.parse::<f64>().map_err(|e| {
                        LabError::Parse(format!("bad tail constant on line {}: {e}", lineno + 1))
                    })?),
                };
                tail_spec = Some((alpha, c));
            }
            continue;
        }
        if line.eq_ignore_ascii_case("n,p") {
            continue;
        }
        let (n_str, p_str) = line.split_once(',').ok_or_else(|| {
            LabError::Parse(format!("line {} is not 'n,p': '{line}'", lineno + 1))
        })?;
        let n: usize = n_str.trim().parse().map_err(|e| {
            LabError::Parse(format!("bad index on line {}: {e}", lineno + 1))
        })?;
        let p: f64 = p_str.trim().parse().map_err(|e| {
            LabError::Parse(format!("bad probability on line {}: {e}", lineno + 1))
        })?;
        if n == 0 {
            return Err(LabError::Parse("atom index 0 is not allowed".into()));
        }
        probs.push((n, p));
    }
    probs.sort_by_key(|&(n, _)| n);
    let k = probs.last().map(|&(n, _)| n).unwrap_or(0);
    let mut dense = vec![0.0; k];
    for (n, p) in probs {
        dense[n - 1] = p;
    }
    match tail_spec {
        Some((alpha, c)) => TailLaw::with_power_tail(dense, alpha, c),
        None => TailLaw::from_probs(dense),
    }
}

/// Writes the CSV interchange format (the resolved tail constant is emitted).
pub fn write_tail_csv(law: &TailLaw) -> String {
    let mut out = String::from("n,p\n");
    for (i, &p) in law.explicit_probs().iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, p));
    }
    if let Some(t) = law.tail_descriptor() {
        out.push_str(&format!("# tail: alpha={},c={}\n", t.alpha, t.c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_maclaurin_matches_brute_force() {
        // ascending-magnitude summation keeps the oracle itself accurate
        for &a in &[1.5, 2.0, 3.0, 4.5] {
            let brute: f64 = (10..4_000_000u64)
                .rev()
                .map(|n| (n as f64).powf(-a))
                .sum::<f64>()
                + euler_maclaurin_tail(a, 4_000_000.0);
            let fast = power_tail_sum(a, 10);
            assert!(
                (brute - fast).abs() <= 1e-11 * brute.abs(),
                "a = {a}: {brute} vs {fast}"
            );
        }
    }

    #[test]
    fn zeta_values() {
        // zeta(2) = pi^2/6, zeta(3) = 1.2020569031595942853997...
        assert!((power_tail_sum(2.0, 1) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
        assert!((power_tail_sum(3.0, 1) - 1.2020569031595942854).abs() < 1e-13);
    }

    #[test]
    fn geometric_mass_and_mean() {
        let law = TailLaw::geometric(0.5).unwrap();
        assert!(law.is_normalized());
        assert!((law.total_mass() - 1.0).abs() < 1e-12);
        assert!((law.first_moment().unwrap() - 2.0).abs() < 1e-12);
        assert!((law.p(3) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn power_law_auto_constant_normalizes() {
        for &alpha in &[1.5, 2.0, 3.0] {
            let law = TailLaw::power(alpha).unwrap();
            assert!(law.is_normalized(), "alpha = {alpha}");
            assert!((law.total_mass() - 1.0).abs() < 1e-12);
            let c = law.tail_descriptor().unwrap().c;
            assert!((c - 1.0 / power_tail_sum(alpha, 1)).abs() < 1e-14);
        }
    }

    #[test]
    fn moments_match_closed_forms() {
        let geo = TailLaw::geometric(0.5).unwrap();
        // M_0(1) = 1, M_1(1) = 2, M_2(1) = sum k^2 2^-k = 6
        assert!((geo.moment(0.0, 1.0).unwrap().value - 1.0).abs() < 1e-12);
        assert!((geo.moment(1.0, 1.0).unwrap().value - 2.0).abs() < 1e-12);
        assert!((geo.moment(2.0, 1.0).unwrap().value - 6.0).abs() < 1e-11);
        // generating function at z = 0.5: sum (z/2)^n = (z/2)/(1-z/2) = 1/3
        assert!((geo.moment(0.0, 0.5).unwrap().value - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn moment_divergence_flag() {
        let law = TailLaw::power(3.0).unwrap();
        let m2 = law.moment(2.0, 1.0).unwrap();
        assert!(!m2.finite, "alpha = 3, gamma = 2 must diverge");
        let m1 = law.moment(1.0, 1.0).unwrap();
        assert!(m1.finite);
        // first_moment agrees with moment(1, 1)
        assert!((law.first_moment().unwrap() - m1.value).abs() < 1e-13);
        assert!(TailLaw::power(1.5).unwrap().first_moment().is_none());
    }

    #[test]
    fn mass_beyond_consistency() {
        let law = TailLaw::power(2.5).unwrap();
        // d_n computed two ways: suffix of materialized + analytic remainder
        let n = 40;
        let p = law.materialize(100_000);
        let direct: f64 = p[n + 1..].iter().sum::<f64>()
            + law.tail_descriptor().unwrap().c * power_tail_sum(2.5, 100_001);
        assert!((law.mass_beyond(n) - direct).abs() < 1e-13);
    }

    #[test]
    fn validation_rejects_bad_laws() {
        assert!(TailLaw::from_probs(vec![0.5, -0.1]).is_err());
        assert!(TailLaw::from_probs(vec![0.9, 0.2]).is_err());
        assert!(TailLaw::with_power_tail(vec![0.5], 0.9, None).is_err());
        assert!(TailLaw::with_power_tail(vec![1.0], 2.0, None).is_err());
    }

    #[test]
    fn spec_strings_round_trip() {
        let g = TailLaw::parse("geometric:q=0.25").unwrap();
        assert!((g.p(1) - 0.25).abs() < 1e-15);
        let u = TailLaw::parse("uniform2").unwrap();
        assert_eq!(u.explicit_probs(), &[0.5, 0.5]);
        let p = TailLaw::parse("power:alpha=3").unwrap();
        assert_eq!(p.tail_descriptor().unwrap().alpha, 3.0);
        assert!(TailLaw::parse("frobnicate").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let law = TailLaw::power(2.5).unwrap();
        let text = write_tail_csv(&law);
        let back = read_tail_csv(&text).unwrap();
        assert_eq!(law.k(), back.k());
        assert!((law.p(5) - back.p(5)).abs() < 1e-15);
        let t0 = law.tail_descriptor().unwrap();
        let t1 = back.tail_descriptor().unwrap();
        assert!((t0.alpha - t1.alpha).abs() < 1e-15 && (t0.c - t1.c).abs() < 1e-15);

        let explicit = read_tail_csv("n,p\n1,0.5\n2,0.5\n").unwrap();
        assert!(explicit.is_normalized());
        assert!(explicit.tail_descriptor().is_none());
    }
}
