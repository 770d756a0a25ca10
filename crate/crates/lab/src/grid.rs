//! Piecewise-linear functions on a uniform grid over [0, 1].
//!
//! Node values define the function everywhere by linear interpolation, so
//! evaluation at arbitrary points is exact for the represented function and
//! sub-cell integrals have closed forms. Level-set boundaries almost never
//! fall on nodes, which is why the partial-cell quadrature here is exact
//! rather than node-sampled.

use crate::error::{LabError, Result};

/// A function known at `n` uniform nodes on [0, 1], interpolated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(LabError::domain("grid needs at least 2 nodes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::domain("grid values must be finite"));
        }
        Ok(GridFn { values })
    }

    pub fn zeros(n: usize) -> Self {
        GridFn {
            values: vec![0.0; n.max(2)],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        let h = 1.0 / (n - 1) as f64;
        GridFn {
            values: (0..n).map(|i| f(i as f64 * h)).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Node spacing.
    pub fn h(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }

    pub fn x_of(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Linear interpolation; arguments are clamped to [0, 1].
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let t = x.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (t as usize).min(n - 2);
        let frac = t - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    /// Trapezoid integral over [0, 1]; exact for the interpolant.
    pub fn integral(&self) -> f64 {
        let n = self.values.len();
        let h = self.h();
        let mut s = 0.5 * (self.values[0] + self.values[n - 1]);
        for &v in &self.values[1..n - 1] {
            s += v;
        }
        s * h
    }

    /// Exact integral of the interpolant over `[lo, hi]`, including partial
    /// cells at both ends.
    pub fn integral_over(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let lo = lo.clamp(0.0, 1.0);
        let hi = hi.clamp(0.0, 1.0);
        let n = self.values.len();
        let h = self.h();
        let cell = |x: f64| -> usize { ((x / h) as usize).min(n - 2) };
        let (ci, cj) = (cell(lo), cell(hi));
        // antiderivative within a single cell from its left node
        let seg = |c: usize, a: f64, b: f64| -> f64 {
            let xa = c as f64 * h;
            let (va, vb) = (self.values[c], self.values[c + 1]);
            let slope = (vb - va) / h;
            let fa = va + slope * (a - xa);
            let fb = va + slope * (b - xa);
            0.5 * (fa + fb) * (b - a)
        };
        if ci == cj {
            return seg(ci, lo, hi);
        }
        let mut total = seg(ci, lo, (ci + 1) as f64 * h);
        for c in (ci + 1)..cj {
            total += 0.5 * (self.values[c] + self.values[c + 1]) * h;
        }
        total += seg(cj, cj as f64 * h, hi);
        total
    }

    /// Integral of `phi(x) f(x)` over [0, 1] by per-cell two-point closure
    /// (`phi` sampled at nodes, both factors linear within cells).
    pub fn integral_weighted(&self, phi: &GridFn) -> Result<f64> {
        if phi.n() != self.n() {
            return Err(LabError::domain("weighted integral needs matching grids"));
        }
        let n = self.values.len();
        let h = self.h();
        let mut s = 0.0;
        for c in 0..n - 1 {
            let (f0, f1) = (self.values[c], self.values[c + 1]);
            let (g0, g1) = (phi.values[c], phi.values[c + 1]);
            // exact integral of the product of two linear functions
            s += h / 6.0 * (2.0 * f0 * g0 + f0 * g1 + f1 * g0 + 2.0 * f1 * g1);
        }
        Ok(s)
    }

    /// Clamp negative values to zero (positivity clipping after operator
    /// application).
    pub fn clip_nonnegative(&mut self) {
        for v in self.values.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Builds the grid representation of `1_E(x) * dens(x)` for a union of
/// disjoint intervals, with exact endpoint fractions.
///
/// Node `j` receives the exact hat-weighted mass `int phi_j 1_E dens dx`
/// (closed form per cell, `dens` taken as its interpolant), divided by the
/// node's trapezoid weight. Hat functions partition unity, so the trapezoid
/// mass of the result equals `int_E dens` exactly, and loads over
/// complementary sets add up to the full-interval load node by node.
pub fn indicator_times(n_grid: usize, intervals: &[(f64, f64)], dens: &GridFn) -> Result<GridFn> {
    if dens.n() != n_grid {
        return Err(LabError::domain("indicator grid must match density grid"));
    }
    let mut node_mass = vec![0.0f64; n_grid];
    let h = 1.0 / (n_grid - 1) as f64;
    let d = dens.values();
    for &(a, b) in intervals {
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || b <= a {
            return Err(LabError::domain(format!(
                "bad interval [{a}, {b}] for indicator"
            )));
        }
        let c_first = ((a / h) as usize).min(n_grid - 2);
        let c_last = ((b / h) as usize).min(n_grid - 2);
        for c in c_first..=c_last {
            let xc = c as f64 * h;
            let p = a.max(xc);
            let q = b.min(xc + h);
            if q <= p {
                continue;
            }
            let (t0, t1) = ((p - xc) / h, (q - xc) / h);
            let (d0, d1) = (d[c], d[c + 1]);
            let right = h * (d0 * (t1 * t1 - t0 * t0) / 2.0
                + (d1 - d0) * (t1 * t1 * t1 - t0 * t0 * t0) / 3.0);
            let total = h * (d0 * (t1 - t0) + (d1 - d0) * (t1 * t1 - t0 * t0) / 2.0);
            node_mass[c] += total - right;
            node_mass[c + 1] += right;
        }
    }
    let values = node_mass
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let w = if j == 0 || j == n_grid - 1 { 0.5 * h } else { h };
            m / w
        })
        .collect();
    GridFn::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_is_exact_on_linear_functions() {
        let f = GridFn::from_fn(65, |x| 3.0 * x - 1.0);
        for &x in &[0.0, 0.013, 0.5, 0.777, 1.0] {
            assert!((f.eval(x) - (3.0 * x - 1.0)).abs() < 1e-14);
        }
        assert!((f.integral() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn partial_integrals_match_closed_form() {
        let f = GridFn::from_fn(129, |x| 2.0 * x);
        // integral of 2x over [a,b] = b^2 - a^2, exact for linear data
        for &(a, b) in &[(0.1, 0.9), (0.0, 0.33), (0.501, 0.502), (0.25, 1.0)] {
            let want = b * b - a * a;
            let got = f.integral_over(a, b);
            assert!((got - want).abs() < 1e-13, "[{a}, {b}]: {got} vs {want}");
        }
        // sum over a partition equals the whole
        let whole = f.integral_over(0.0, 1.0);
        let split = f.integral_over(0.0, 0.371) + f.integral_over(0.371, 1.0);
        assert!((whole - split).abs() < 1e-14);
    }

    #[test]
    fn weighted_integral_of_linear_product() {
        let f = GridFn::from_fn(257, |x| x);
        let g = GridFn::from_fn(257, |x| 1.0 - x);
        // int x(1-x) = 1/6, exact per cell for linear factors
        let got = f.integral_weighted(&g).unwrap();
        assert!((got - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn indicator_loading_preserves_mass() {
        let dens = GridFn::from_fn(1025, |x| 1.0 + x * x);
        for &(a, b) in &[(0.1003, 0.51117), (0.5, 1.0), (0.0, 0.25)] {
            let ind = indicator_times(1025, &[(a, b)], &dens).unwrap();
            let mass = ind.integral();
            let want = dens.integral_over(a, b);
            assert!(
                (mass - want).abs() < 1e-12,
                "[{a}, {b}]: {mass} vs {want}"
            );
        }
    }

    #[test]
    fn indicator_of_disjoint_union() {
        let dens = GridFn::from_fn(513, |_| 1.0);
        let ind = indicator_times(513, &[(0.1, 0.2), (0.6, 0.9)], &dens).unwrap();
        assert!((ind.integral() - 0.4).abs() < 1e-12);
        // well inside vs well outside
        assert!((ind.eval(0.15) - 1.0).abs() < 1e-12);
        assert!(ind.eval(0.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(GridFn::new(vec![1.0]).is_err());
        assert!(GridFn::new(vec![1.0, f64::NAN]).is_err());
        let dens = GridFn::from_fn(64, |_| 1.0);
        assert!(indicator_times(64, &[(0.5, 0.4)], &dens).is_err());
    }
}
