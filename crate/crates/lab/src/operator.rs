//! Transfer operators on the grid.
//!
//! Two operators matter here. The induced operator acts through the countably
//! many inverse branches `G_k` of the first-return map,
//! `(M_{z,N} f)(y) = sum_{k<=N} z^k w_k(y) f(G_k(y))`,
//! where the weight is the branch derivative `G_k'(y)` (or a constant
//! surrogate `p_k` in Markov mode, which makes every eigenquantity exactly
//! computable). The original-map operator `L = L_0 + L_1` acts through the
//! two inverse branches of the map itself. They are linked by the identity
//! `(1 - M_z)(1 - z L_0) f = (1 - z L) f`, which the module checks at
//! consistent truncation.
//!
//! Discretization is collocation with piecewise-linear interpolation: branch
//! images of every node are computed once, then operator application is a
//! weighted gather. The leading eigendata come from power iteration on the
//! function side and adjoint iteration on the measure side.

use crate::error::{LabError, Result};
use crate::grid::GridFn;
use crate::map::{level_sets, BranchGeometry, MapModel};
use crate::rng::SplitMix64;
use crate::tail::TailLaw;

/// Branch-weight mode for the induced operator.
#[derive(Debug, Clone)]
pub enum BranchWeights {
    /// Geometric weights `G_k'(y)`: the transfer operator of the induced map.
    Derivative,
    /// Piecewise-constant surrogate weights `p_k` (Markov mode); the leading
    /// eigenvalue is then exactly `sum_k z^k p_k`.
    Constant(Vec<f64>),
}

/// Assembled truncated induced operator at fixed `z`.
#[derive(Debug, Clone)]
pub struct InducedOperator {
    pub z: f64,
    pub n_branches: usize,
    pub n_grid: usize,
    /// `points[i * n_branches + (k-1)] = G_k(y_i)`.
    points: Vec<f64>,
    /// Base weights `w_k(y_i)` without the `z^k` factor.
    weights: Vec<f64>,
    /// `zpow[k-1] = z^k`.
    zpow: Vec<f64>,
}

impl InducedOperator {
    #[inline]
    fn gather(&self, v: &[f64], pos: f64) -> f64 {
        let t = pos * (self.n_grid - 1) as f64;
        let c = (t as usize).min(self.n_grid - 2);
        let frac = t - c as f64;
        v[c] + frac * (v[c + 1] - v[c])
    }

    /// `(M_{z,N} f)` at every node, `f` taken as its interpolant.
    pub fn apply_values(&self, v: &[f64]) -> Vec<f64> {
        self.apply_moment_values(v, 0)
    }

    /// Same with derivative-order weights `k^m z^k` (the operators obtained
    /// by applying `z d/dz` m times).
    pub fn apply_moment_values(&self, v: &[f64], m_order: u32) -> Vec<f64> {
        let nb = self.n_branches;
        let mut out = vec![0.0; self.n_grid];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * nb;
            let mut acc = 0.0;
            for k in 0..nb {
                let km = if m_order == 0 {
                    1.0
                } else {
                    ((k + 1) as f64).powi(m_order as i32)
                };
                acc += self.zpow[k] * km * self.weights[base + k]
                    * self.gather(v, self.points[base + k]);
            }
            *o = acc;
        }
        out
    }

    pub fn apply(&self, f: &GridFn) -> GridFn {
        GridFn::new(self.apply_values(f.values())).expect("operator output is finite")
    }

    /// Applies the operator to an exactly evaluable function (no re-sampling
    /// of intermediate results), used by the operator-identity check.
    pub fn apply_fn(&self, g: impl Fn(f64) -> f64) -> Vec<f64> {
        let nb = self.n_branches;
        let mut out = vec![0.0; self.n_grid];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * nb;
            let mut acc = 0.0;
            for k in 0..nb {
                acc += self.zpow[k] * self.weights[base + k] * g(self.points[base + k]);
            }
            *o = acc;
        }
        out
    }

    /// Adjoint action on node-atom measures, scattering each contribution to
    /// the two nodes bracketing the branch image. Accumulation order is fixed
    /// by (node, branch) so results are reproducible.
    pub fn adjoint_apply(&self, nu: &[f64]) -> Vec<f64> {
        let nb = self.n_branches;
        let mut out = vec![0.0; self.n_grid];
        for (i, &ni) in nu.iter().enumerate() {
            if ni == 0.0 {
                continue;
            }
            let base = i * nb;
            for k in 0..nb {
                let w = ni * self.zpow[k] * self.weights[base + k];
                let t = self.points[base + k] * (self.n_grid - 1) as f64;
                let c = (t as usize).min(self.n_grid - 2);
                let frac = t - c as f64;
                out[c] += w * (1.0 - frac);
                out[c + 1] += w * frac;
            }
        }
        out
    }
}

/// Builds the truncated induced operator on `n_grid` collocation nodes.
///
/// Branch images share one backward orbit per node, so assembly costs one
/// root solve per (node, branch) pair.
pub fn assemble_induced_op(
    m: &MapModel,
    z: f64,
    n_branches: usize,
    n_grid: usize,
    mode: &BranchWeights,
) -> Result<InducedOperator> {
    if !(0.0..=1.0).contains(&z) {
        return Err(LabError::domain(format!("z = {z} outside [0, 1]")));
    }
    if n_branches < 1 {
        return Err(LabError::domain("need at least one branch"));
    }
    if n_grid < 64 {
        return Err(LabError::domain("operator grid needs at least 64 nodes"));
    }
    if let BranchWeights::Constant(p) = mode {
        if p.len() < n_branches {
            return Err(LabError::domain(format!(
                "constant weights supply {} branches, need {n_branches}",
                p.len()
            )));
        }
    }
    let nb = n_branches;
    let mut points = vec![0.0; n_grid * nb];
    let mut weights = vec![0.0; n_grid * nb];
    let h = 1.0 / (n_grid - 1) as f64;
    for i in 0..n_grid {
        let y = (i as f64 * h).min(1.0);
        let trail = m.inverse_branch_trail(y, nb)?;
        let base = i * nb;
        points[base..base + nb].copy_from_slice(&trail.points);
        match mode {
            BranchWeights::Derivative => {
                weights[base..base + nb].copy_from_slice(&trail.derivs);
            }
            BranchWeights::Constant(p) => {
                weights[base..base + nb].copy_from_slice(&p[..nb]);
            }
        }
    }
    let zpow = (1..=nb).map(|k| z.powi(k as i32)).collect();
    Ok(InducedOperator {
        z,
        n_branches,
        n_grid,
        points,
        weights,
        zpow,
    })
}

/// Leading eigendata of a truncated induced operator: eigenvalue, positive
/// eigenfunction and eigen-measure, normalized by `sum nu_i = 1` and
/// `nu(h) = 1`.
#[derive(Debug, Clone)]
pub struct EigenTriple {
    pub lambda: f64,
    pub h: GridFn,
    /// Node-atom weights of the eigen-measure, total mass 1.
    pub nu: Vec<f64>,
    pub z: f64,
    pub n_branches: usize,
    /// Final sup-norm residual of the eigenfunction equation.
    pub residual: f64,
    pub iterations: usize,
}

impl EigenTriple {
    /// `nu(f)` for node values `f`.
    pub fn nu_of_values(&self, v: &[f64]) -> f64 {
        self.nu.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
    }

    /// The eigen-measure as a density (atoms divided by trapezoid weights).
    pub fn nu_density(&self) -> GridFn {
        let n = self.nu.len();
        let h = 1.0 / (n - 1) as f64;
        let mut vals = vec![0.0; n];
        for (i, item) in vals.iter_mut().enumerate() {
            let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            *item = self.nu[i] / w;
        }
        GridFn::new(vals).expect("density is finite")
    }

    /// Density of the invariant probability of the induced map, `h * nu`.
    pub fn rho_density(&self) -> GridFn {
        let nu_d = self.nu_density();
        let vals = self
            .h
            .values()
            .iter()
            .zip(nu_d.values())
            .map(|(a, b)| a * b)
            .collect();
        GridFn::new(vals).expect("density is finite")
    }
}

/// Power iteration on the function side, adjoint iteration on the measure
/// side, Rayleigh-quotient eigenvalue.
pub fn leading_triple(
    op: &InducedOperator,
    tol: f64,
    max_iter: usize,
) -> Result<EigenTriple> {
    if op.z <= 0.0 {
        return Err(LabError::domain("leading eigendata need z > 0"));
    }
    let n = op.n_grid;
    let mut h = vec![1.0f64; n];
    let mut nu = vec![1.0 / n as f64; n];
    let mut lambda = 1.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let mh = op.apply_values(&h);
        let num: f64 = nu.iter().zip(mh.iter()).map(|(a, b)| a * b).sum();
        let den: f64 = nu.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
        lambda = num / den;
        let hmax = h.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        residual = mh
            .iter()
            .zip(h.iter())
            .map(|(a, b)| (a - lambda * b).abs())
            .fold(0.0f64, f64::max)
            / hmax;
        // normalize the new iterate to sup-norm 1
        let mmax = mh.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if mmax == 0.0 {
            return Err(LabError::numerical("operator annihilated the iterate", 0.0));
        }
        h = mh.iter().map(|&v| v / mmax).collect();
        let mtnu = op.adjoint_apply(&nu);
        let total: f64 = mtnu.iter().sum();
        if total <= 0.0 {
            return Err(LabError::numerical("adjoint iterate lost positivity", total));
        }
        nu = mtnu.iter().map(|&v| v / total).collect();
        if residual <= tol && it >= 3 {
            break;
        }
    }
    if residual > tol {
        return Err(LabError::numerical(
            format!("eigensolve did not reach tol {tol} in {max_iter} iterations"),
            residual,
        ));
    }
    // scale h so nu(h) = 1 (nu already has total mass 1)
    let nh: f64 = nu.iter().zip(h.iter()).map(|(a, b)| a * b).sum();
    let h = GridFn::new(h.iter().map(|&v| v / nh).collect())?;
    if h.values().iter().any(|&v| v <= 0.0) {
        return Err(LabError::numerical("eigenfunction lost positivity", 0.0));
    }
    Ok(EigenTriple {
        lambda,
        h,
        nu,
        z: op.z,
        n_branches: op.n_branches,
        residual,
        iterations,
    })
}

/// Level-set masses of the induced invariant measure.
#[derive(Debug, Clone)]
pub struct CylinderMeasures {
    /// `p_n = rho(A_n)` for `n <= n_max`, packaged as a law with the analytic
    /// tail `alpha = 1 + 1/s` absorbing the truncation deficit.
    pub law: TailLaw,
    /// Raw quadrature values before packaging.
    pub raw: Vec<f64>,
    /// `1 - sum_n p_n`.
    pub deficit: f64,
    pub geometry: BranchGeometry,
}

/// Quadrature of `rho(A_n) = int_{A_n} h dnu` over the level sets, with exact
/// endpoint fractions inside grid cells.
pub fn cylinder_measures(
    triple: &EigenTriple,
    m: &MapModel,
    n_max: usize,
) -> Result<CylinderMeasures> {
    let geo = level_sets(m, n_max)?;
    let rho = triple.rho_density();
    let mut raw = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let p = rho.integral_over(geo.endpoint(n), geo.endpoint(n - 1));
        raw.push(p.max(0.0));
    }
    let total: f64 = raw.iter().sum();
    let deficit = 1.0 - total;
    let alpha = 1.0 + 1.0 / m.s;
    let law = if deficit > 1e-12 {
        TailLaw::with_power_tail(raw.clone(), alpha, None)?
    } else {
        TailLaw::from_probs(raw.clone())?
    };
    Ok(CylinderMeasures {
        law,
        raw,
        deficit,
        geometry: geo,
    })
}

/// Value of the sigma-finite invariant density
/// `e(x) = sum_{n=0}^{N_e} h(F_0^n x) (F_0^n)'(x)` at one point.
///
/// Terms are positive, so partial sums increase in the truncation order.
pub fn sigma_finite_density(
    triple: &EigenTriple,
    m: &MapModel,
    n_terms: usize,
    x: f64,
) -> Result<f64> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(LabError::domain(format!(
            "sigma-finite density diverges at x = {x} (needs x in (0, 1])"
        )));
    }
    let mut u = x;
    let mut w = 1.0;
    let mut acc = triple.h.eval(u);
    for _ in 1..=n_terms {
        let next = m.inverse_left(u)?;
        w /= m.f_prime(next);
        u = next;
        acc += triple.h.eval(u) * w;
    }
    Ok(acc)
}

/// Grid representation of the invariant density, with an analytic closure of
/// the backward-orbit tail once the orbit is deep enough that the normal-form
/// asymptotics apply. Node 0 carries a finite extrapolated value; the true
/// density diverges there and integrals against it must stay away from 0.
pub fn density_on_grid(
    triple: &EigenTriple,
    m: &MapModel,
    n_grid: usize,
    u_stop: f64,
    max_terms: usize,
) -> Result<GridFn> {
    let n = n_grid;
    let h_spacing = 1.0 / (n - 1) as f64;
    let h0 = triple.h.eval(0.0);
    let mut vals = vec![0.0; n];
    for (i, item) in vals.iter_mut().enumerate().skip(1) {
        let x = (i as f64 * h_spacing).min(1.0);
        let mut u = x;
        let mut w = 1.0;
        let mut acc = triple.h.eval(u);
        let mut terms = 0usize;
        while u > u_stop && terms < max_terms {
            let next = m.inverse_left(u)?;
            w /= m.f_prime(next);
            u = next;
            acc += triple.h.eval(u) * w;
            terms += 1;
        }
        if terms >= max_terms && u > u_stop {
            return Err(LabError::Resource(format!(
                "density orbit at x = {x} did not reach depth {u_stop} in {max_terms} terms"
            )));
        }
        // analytic remainder: sum_{j>0} h(u_j) w_j with u_j following the
        // normal form (u^-s + r s j)^(-1/s) and w_j ~ w (u_j / u)^(1+s)
        let (r, s) = (m.r, m.s);
        let tail = h0 * w * u.powf(-(1.0 + s)) / r * (u.powf(-s) + 0.5 * r * s).powf(-1.0 / s);
        *item = acc + tail;
    }
    // node 0: finite placeholder from local power extrapolation; never used
    // by integrals over sets bounded away from the origin
    let e1 = vals[1];
    let e2 = vals[2];
    vals[0] = if e2 > 0.0 {
        (e1 * e1 / e2).min(1e6 * e1.max(1.0))
    } else {
        e1
    };
    GridFn::new(vals)
}

/// Original-map transfer operator with precomputed branch tables: one gather
/// per branch per node.
#[derive(Debug, Clone)]
pub struct OriginalOp {
    pub n_grid: usize,
    /// `(position, weight)` of the left-branch preimage per node.
    left: Vec<(f64, f64)>,
    /// Same for the right branch.
    right: Vec<(f64, f64)>,
}

impl OriginalOp {
    pub fn new(m: &MapModel, n_grid: usize) -> Result<Self> {
        if n_grid < 64 {
            return Err(LabError::domain("operator grid needs at least 64 nodes"));
        }
        let h = 1.0 / (n_grid - 1) as f64;
        let mut left = Vec::with_capacity(n_grid);
        let mut right = Vec::with_capacity(n_grid);
        for i in 0..n_grid {
            let y = (i as f64 * h).min(1.0);
            let xl = m.inverse_left(y)?;
            left.push((xl, 1.0 / m.f_prime(xl)));
            let xr = m.inverse_branch(1, y)?;
            right.push((xr, 1.0 / m.right_slope()));
        }
        Ok(OriginalOp {
            n_grid,
            left,
            right,
        })
    }

    #[inline]
    fn gather(v: &[f64], pos: f64, n: usize) -> f64 {
        let t = pos * (n - 1) as f64;
        let c = (t as usize).min(n - 2);
        let frac = t - c as f64;
        v[c] + frac * (v[c + 1] - v[c])
    }

    /// `(L f)(y_i)` into `dst`.
    pub fn apply_into(&self, src: &[f64], dst: &mut [f64]) {
        let n = self.n_grid;
        for i in 0..n {
            let (pl, wl) = self.left[i];
            let (pr, wr) = self.right[i];
            dst[i] = wl * Self::gather(src, pl, n) + wr * Self::gather(src, pr, n);
        }
    }

    /// Left-branch part only.
    pub fn apply_left_into(&self, src: &[f64], dst: &mut [f64]) {
        let n = self.n_grid;
        for i in 0..n {
            let (pl, wl) = self.left[i];
            dst[i] = wl * Self::gather(src, pl, n);
        }
    }
}

/// `(L f, L_0 f, L_1 f)` at the nodes, evaluating `f` exactly as its
/// interpolant at the branch preimages.
pub fn original_op_apply(m: &MapModel, f: &GridFn) -> Result<(GridFn, GridFn, GridFn)> {
    let n = f.n();
    let op = OriginalOp::new(m, n)?;
    let mut l0 = vec![0.0; n];
    let mut l1 = vec![0.0; n];
    for i in 0..n {
        let (pl, wl) = op.left[i];
        let (pr, wr) = op.right[i];
        l0[i] = wl * f.eval(pl);
        l1[i] = wr * f.eval(pr);
    }
    let l: Vec<f64> = l0.iter().zip(l1.iter()).map(|(a, b)| a + b).collect();
    Ok((GridFn::new(l)?, GridFn::new(l0)?, GridFn::new(l1)?))
}

/// Sup-norm residual over interior nodes of
/// `(1 - M_{z,N})(1 - z L_0) f - (1 - z L) f`
/// at consistent truncation. `(1 - z L_0) f` is applied as an exactly
/// evaluable function of the interpolant `f`, so the telescoping of the two
/// sides is not spoiled by re-sampling.
pub fn identity_check(
    m: &MapModel,
    z: f64,
    f: &GridFn,
    n_branches: usize,
    n_grid: usize,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(LabError::domain(format!("z = {z} outside [0, 1]")));
    }
    let g = |u: f64| -> f64 {
        if z == 0.0 {
            f.eval(u)
        } else {
            let x0 = m.inverse_left(u).expect("left inverse in [0,1]");
            f.eval(u) - z * f.eval(x0) / m.f_prime(x0)
        }
    };
    let h = 1.0 / (n_grid - 1) as f64;
    let mg = if z == 0.0 {
        vec![0.0; n_grid]
    } else {
        let op = assemble_induced_op(m, z, n_branches, n_grid, &BranchWeights::Derivative)?;
        op.apply_fn(&g)
    };
    let mut worst = 0.0f64;
    for i in 1..n_grid - 1 {
        let y = i as f64 * h;
        let lhs = g(y) - mg[i];
        let x0 = m.inverse_left(y)?;
        let x1 = m.inverse_branch(1, y)?;
        let lf = f.eval(x0) / m.f_prime(x0) + f.eval(x1) / m.right_slope();
        let rhs = f.eval(y) - z * lf;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Pressure values and one-sided derivatives at `z = 1`.
#[derive(Debug, Clone, Copy)]
pub struct PressureReport {
    /// `P(1) = log lambda_1` of the truncated operator.
    pub p_at_1: f64,
    /// `(zD) P` at 1 (Richardson-extrapolated one-sided stencil).
    pub zd_p: Option<f64>,
    /// `(zD)^2 P` at 1.
    pub zd2_p: Option<f64>,
    /// Comparison target `M_1 = sum k p_k` from the cylinder masses.
    pub m1_target: f64,
    /// Fit step actually used (in `log z`).
    pub fd_step: f64,
}

/// Pressure `P(z) = log lambda_z` near `z = 1` with one-sided stencils in
/// `log z` (the certified domain ends at 1). The requested derivative order
/// must be admissible for the map's ergodic degree `d = 1/s - 1`.
pub fn pressure_and_derivatives(
    m: &MapModel,
    n_branches: usize,
    n_grid: usize,
    fd_step: f64,
    order: u32,
) -> Result<PressureReport> {
    let d = 1.0 / m.s - 1.0;
    if order >= 1 && d <= 0.0 {
        return Err(LabError::Unsupported(format!(
            "insufficient ergodic degree: first pressure derivative needs d > 0, map has d = {d}"
        )));
    }
    if order >= 2 && d <= 1.0 {
        return Err(LabError::Unsupported(format!(
            "insufficient ergodic degree: second pressure derivative needs d > 1, map has d = {d}"
        )));
    }
    if !(fd_step > 0.0 && fd_step < 0.1) {
        return Err(LabError::domain(format!("bad finite-difference step {fd_step}")));
    }
    let tol = 1e-12;
    let max_iter = 5000;
    let pressure_at = |t: f64| -> Result<f64> {
        let z = t.exp();
        let op = assemble_induced_op(m, z, n_branches, n_grid, &BranchWeights::Derivative)?;
        let triple = leading_triple(&op, tol, max_iter)?;
        Ok(triple.lambda.ln())
    };
    let eta = fd_step;
    let p0 = pressure_at(0.0)?;
    let mut zd_p = None;
    let mut zd2_p = None;
    if order >= 1 {
        let pm1 = pressure_at(-eta)?;
        let pm2 = pressure_at(-2.0 * eta)?;
        let pm4 = pressure_at(-4.0 * eta)?;
        let d1 = (3.0 * p0 - 4.0 * pm1 + pm2) / (2.0 * eta);
        let d1_coarse = (3.0 * p0 - 4.0 * pm2 + pm4) / (4.0 * eta);
        zd_p = Some((4.0 * d1 - d1_coarse) / 3.0);
        if order >= 2 {
            let pm3 = pressure_at(-3.0 * eta)?;
            zd2_p = Some((2.0 * p0 - 5.0 * pm1 + 4.0 * pm2 - pm3) / (eta * eta));
        }
    }
    // comparison target from the level-set masses at z = 1
    let op1 = assemble_induced_op(m, 1.0, n_branches, n_grid, &BranchWeights::Derivative)?;
    let triple1 = leading_triple(&op1, tol, max_iter)?;
    let cm = cylinder_measures(&triple1, m, n_branches)?;
    let m1_target = cm
        .law
        .first_moment()
        .ok_or_else(|| LabError::Unsupported("cylinder law has infinite mean".into()))?;
    Ok(PressureReport {
        p_at_1: p0,
        zd_p,
        zd2_p,
        m1_target,
        fd_step: eta,
    })
}

/// Batch-means estimate of the asymptotic variance of the return time along
/// an induced orbit: `sigma^2 = lim Var(tau_0 + .. + tau_{B-1}) / B`.
/// Returns the estimate with its standard error.
pub fn sigma_sq_orbit(
    m: &MapModel,
    n_batches: usize,
    batch_len: usize,
    burn_in: usize,
    seed: u64,
    tau_cap: usize,
) -> Result<(f64, f64)> {
    if n_batches < 8 || batch_len < 16 {
        return Err(LabError::domain("need at least 8 batches of 16 steps"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut x = 0.1 + 0.8 * rng.next_f64();
    for _ in 0..burn_in {
        let step = m.induced_apply(x, tau_cap)?;
        x = step.value.min(1.0 - 1e-13).max(1e-13);
    }
    let mut batch_means = Vec::with_capacity(n_batches);
    let mut grand = 0.0f64;
    for _ in 0..n_batches {
        let mut acc = 0.0f64;
        for _ in 0..batch_len {
            let step = m.induced_apply(x, tau_cap)?;
            acc += step.tau as f64;
            x = step.value.min(1.0 - 1e-13).max(1e-13);
        }
        let mean = acc / batch_len as f64;
        grand += mean;
        batch_means.push(mean);
    }
    grand /= n_batches as f64;
    let mut var_of_means = 0.0f64;
    for &bm in &batch_means {
        var_of_means += (bm - grand) * (bm - grand);
    }
    var_of_means /= (n_batches - 1) as f64;
    let sigma2 = batch_len as f64 * var_of_means;
    let se = sigma2 * (2.0 / (n_batches as f64 - 1.0)).sqrt();
    Ok((sigma2, se))
}

/// Gibbs ratios `rho(D_eta) / prod psi` for induced words `eta`, where
/// `D_eta` is the interval cut by the composed inverse branches and the
/// comparison weight is their composed derivative at an interior point.
pub fn gibbs_ratios(
    triple: &EigenTriple,
    m: &MapModel,
    words: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let rho = triple.rho_density();
    let mut out = Vec::with_capacity(words.len());
    for word in words {
        if word.is_empty() {
            return Err(LabError::domain("empty induced word"));
        }
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        let mut mid = 0.5f64;
        let mut deriv = 1.0f64;
        for &k in word.iter().rev() {
            lo = m.induced_inverse_branch(k, lo)?.0;
            hi = m.induced_inverse_branch(k, hi)?.0;
            let (mv, md) = m.induced_inverse_branch(k, mid)?;
            mid = mv;
            deriv *= md;
        }
        let mass = rho.integral_over(lo.min(hi), lo.max(hi));
        out.push(mass / deriv);
    }
    Ok(out)
}

/// Weak-Gibbs trace `mu_hat(A_n) / psi_n` with `psi_n` the induced-branch
/// derivative scale at an interior point; grows like `n` for finite degree.
pub fn weak_gibbs_trace(
    m: &MapModel,
    law: &TailLaw,
    m1: f64,
    n_hi: usize,
) -> Result<Vec<f64>> {
    let trail = m.inverse_branch_trail(0.5, n_hi)?;
    let mut out = vec![0.0; n_hi + 1];
    for (n, item) in out.iter_mut().enumerate().skip(1) {
        let mu_an = law.mass_beyond(n - 1) / m1;
        *item = mu_an / trail.derivs[n - 1];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::fit_exponent;

    fn solve(m: &MapModel, z: f64, nb: usize, ng: usize) -> EigenTriple {
        let op = assemble_induced_op(m, z, nb, ng, &BranchWeights::Derivative).unwrap();
        leading_triple(&op, 1e-12, 4000).unwrap()
    }

    #[test]
    fn single_branch_operator_on_constants() {
        // only G_1 (linear right branch): (M_{z,1} 1)(y) = z * 0.5
        let m = MapModel::lsv(1.0).unwrap();
        for &z in &[0.3, 0.9] {
            let op = assemble_induced_op(&m, z, 1, 128, &BranchWeights::Derivative).unwrap();
            let one = GridFn::from_fn(128, |_| 1.0);
            let out = op.apply(&one);
            for &v in out.values() {
                assert!((v - 0.5 * z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn induced_operator_change_of_variables() {
        // int (M_{1,N} f) dy = sum_{k<=N} int_{A_k} f dx; with f = identity
        // the right side is (1 - x_N^2)/2
        let m = MapModel::lsv(0.5).unwrap();
        let n_grid = 8193;
        let op = assemble_induced_op(&m, 1.0, 200, n_grid, &BranchWeights::Derivative).unwrap();
        let applied = op.apply_fn(|x| x);
        let lhs = GridFn::new(applied).unwrap().integral();
        let geo = level_sets(&m, 200).unwrap();
        let xn = geo.endpoint(200);
        let rhs = 0.5 * (1.0 - xn * xn);
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn operator_monotone_in_z() {
        let m = MapModel::lsv(0.5).unwrap();
        let one = GridFn::from_fn(128, |_| 1.0);
        let lo = assemble_induced_op(&m, 0.4, 60, 128, &BranchWeights::Derivative)
            .unwrap()
            .apply(&one);
        let hi = assemble_induced_op(&m, 0.8, 60, 128, &BranchWeights::Derivative)
            .unwrap()
            .apply(&one);
        for (a, b) in lo.values().iter().zip(hi.values()) {
            assert!(a < b);
        }
    }

    #[test]
    fn moment_weighted_operators() {
        // constant weights: (M^(m) 1)(y) = sum_k k^m z^k p_k exactly
        let m = MapModel::lsv(0.5).unwrap();
        let law = TailLaw::geometric(0.5).unwrap();
        let p = law.materialize(60)[1..].to_vec();
        let z = 0.8;
        let op = assemble_induced_op(&m, z, 60, 128, &BranchWeights::Constant(p)).unwrap();
        let one = vec![1.0; 128];
        for m_order in 0..=2u32 {
            let out = op.apply_moment_values(&one, m_order);
            let want: f64 = (1..=60)
                .map(|k| (k as f64).powi(m_order as i32) * z.powi(k as i32) * law.p(k))
                .sum();
            for &v in &out {
                assert!((v - want).abs() < 1e-12, "order {m_order}: {v} vs {want}");
            }
        }
        // derivative weights: nu(M^(1) h) is the first moment of the cylinder
        // masses (term-wise z d/dz of the eigenvalue relation)
        let op1 = assemble_induced_op(&m, 1.0, 300, 512, &BranchWeights::Derivative).unwrap();
        let triple = leading_triple(&op1, 1e-12, 4000).unwrap();
        let m1_op = triple.nu_of_values(&op1.apply_moment_values(triple.h.values(), 1));
        let cm = cylinder_measures(&triple, &m, 300).unwrap();
        let m1_cyl: f64 = cm.raw.iter().enumerate().map(|(i, &p)| (i + 1) as f64 * p).sum();
        assert!(
            (m1_op - m1_cyl).abs() < 0.02 * m1_cyl,
            "{m1_op} vs {m1_cyl}"
        );
    }

    #[test]
    fn weak_gibbs_trace_grows_linearly() {
        let m = MapModel::lsv(0.5).unwrap();
        let triple = solve(&m, 1.0, 400, 1024);
        let cm = cylinder_measures(&triple, &m, 400).unwrap();
        let m1 = cm.law.first_moment().unwrap();
        let trace = weak_gibbs_trace(&m, &cm.law, m1, 300).unwrap();
        let fit = fit_exponent(&trace, 20, 300).unwrap();
        assert!(
            (fit.slope - 1.0).abs() < 0.15,
            "weak-Gibbs trace slope {} +- {}",
            fit.slope,
            fit.stderr
        );
    }

    #[test]
    fn second_pressure_derivative_matches_orbit_variance() {
        // d = 2 regime: (zD)^2 P at 1 equals the asymptotic variance of the
        // return time along induced orbits
        let m = MapModel::lsv(1.0 / 3.0).unwrap();
        let rep = pressure_and_derivatives(&m, 300, 512, 1e-3, 2).unwrap();
        let zd2 = rep.zd2_p.unwrap();
        let (s2, se) = sigma_sq_orbit(&m, 1000, 10_000, 100_000, 31, 1_000_000).unwrap();
        assert!(
            (zd2 - s2).abs() < 4.0 * se + 0.05 * s2.abs(),
            "(zD)^2 P = {zd2}, orbit sigma^2 = {s2} +- {se}"
        );
    }

    #[test]
    fn markov_mode_eigenvalue_is_generating_function() {
        let m = MapModel::lsv(0.5).unwrap();
        let law = TailLaw::geometric(0.5).unwrap();
        let p = law.materialize(80)[1..].to_vec();
        for &z in &[0.25, 0.5, 0.9, 1.0] {
            let op = assemble_induced_op(&m, z, 80, 128, &BranchWeights::Constant(p.clone()))
                .unwrap();
            let triple = leading_triple(&op, 1e-13, 500).unwrap();
            let want: f64 = (1..=80).map(|k| z.powi(k as i32) * law.p(k)).sum();
            assert!(
                (triple.lambda - want).abs() < 1e-10,
                "z = {z}: {} vs {want}",
                triple.lambda
            );
        }
    }

    #[test]
    fn eigenvalue_ordering_in_z() {
        let m = MapModel::lsv(0.5).unwrap();
        let l1 = solve(&m, 0.5, 100, 256).lambda;
        let l2 = solve(&m, 0.9, 100, 256).lambda;
        let l3 = solve(&m, 1.0, 100, 256).lambda;
        assert!(l1 < l2 && l2 < l3 && l3 <= 1.0 + 1e-9);
    }

    #[test]
    fn truncated_eigenvalue_near_one_with_small_deficit() {
        let m = MapModel::lsv(0.5).unwrap();
        let nb = 300;
        let triple = solve(&m, 1.0, nb, 512);
        let cm = cylinder_measures(&triple, &m, nb).unwrap();
        assert!(triple.lambda <= 1.0 + 1e-9);
        assert!(
            triple.lambda > 1.0 - cm.deficit - 5e-3,
            "lambda = {}, deficit = {}",
            triple.lambda,
            cm.deficit
        );
        // normalization contracts
        let nh = triple.nu_of_values(triple.h.values());
        assert!((nh - 1.0).abs() < 1e-10);
        let total: f64 = triple.nu.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(triple.nu.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cylinder_masses_follow_level_lengths() {
        let m = MapModel::lsv(0.5).unwrap();
        let triple = solve(&m, 1.0, 420, 1024);
        let cm = cylinder_measures(&triple, &m, 420).unwrap();
        // fitted exponent of p_n over [50, 400] ~ -(1 + 1/s) = -3
        let mut padded = vec![0.0];
        padded.extend_from_slice(&cm.raw);
        let fit = fit_exponent(&padded, 50, 400).unwrap();
        assert!(
            (fit.slope + 3.0).abs() < 0.1,
            "slope {} (+-{})",
            fit.slope,
            fit.stderr
        );
        // p_n ~ h(0) |A_n| within 5% at n = 300
        let h0 = triple.h.eval(0.0);
        let ratio = cm.raw[299] / (h0 * cm.geometry.length(300));
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
        // deficit shrinks as the truncation grows
        let t2 = solve(&m, 1.0, 200, 1024);
        let cm2 = cylinder_measures(&t2, &m, 200).unwrap();
        assert!(cm.deficit < cm2.deficit);
    }

    #[test]
    fn sigma_finite_density_profile() {
        let m = MapModel::lsv(0.5).unwrap();
        let triple = solve(&m, 1.0, 200, 512);
        // partial sums nondecreasing
        let mut prev = 0.0;
        for terms in [0, 1, 2, 4, 8, 64, 512] {
            let v = sigma_finite_density(&triple, &m, terms, 0.37).unwrap();
            assert!(v >= prev - 1e-14);
            prev = v;
        }
        assert!(sigma_finite_density(&triple, &m, 10, 0.0).is_err());
        // e(x) x^s bounded above and below on [1e-4, 0.1]
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 1..=60 {
            let x = 1e-4 * (0.1f64 / 1e-4).powf(i as f64 / 60.0);
            let v = sigma_finite_density(&triple, &m, 40_000, x).unwrap();
            let scaled = v * x.powf(m.s);
            lo = lo.min(scaled);
            hi = hi.max(scaled);
        }
        assert!(lo > 0.0 && hi / lo < 3.0, "e(x) x^s range [{lo}, {hi}]");
    }

    #[test]
    fn density_grid_matches_pointwise_sum() {
        let m = MapModel::lsv(0.5).unwrap();
        let triple = solve(&m, 1.0, 200, 512);
        let e = density_on_grid(&triple, &m, 513, 5e-4, 2_000_000).unwrap();
        for &x in &[0.25, 0.5078125, 0.75, 1.0] {
            let direct = sigma_finite_density(&triple, &m, 60_000, x).unwrap();
            let grid = e.eval(x);
            assert!(
                (direct - grid).abs() < 2e-4 * direct,
                "x = {x}: {direct} vs {grid}"
            );
        }
    }

    #[test]
    fn lebesgue_conservation_of_original_operator() {
        let m = MapModel::lsv(0.5).unwrap();
        let f = GridFn::from_fn(262_145, |x| 1.0 + 0.3 * (6.0 * x).sin() + x * x);
        let (lf, l0f, l1f) = original_op_apply(&m, &f).unwrap();
        // node-wise split agrees
        for i in 0..lf.n() {
            assert!((lf.values()[i] - l0f.values()[i] - l1f.values()[i]).abs() < 1e-14);
        }
        assert!(
            (lf.integral() - f.integral()).abs() < 1e-8,
            "mass defect {}",
            (lf.integral() - f.integral()).abs()
        );
        // (L 1)(y) = F_0'(y) + F_1'(y) with inverse branch derivatives,
        // checked at an exact node
        let one = GridFn::from_fn(129, |_| 1.0);
        let (l_one, _, _) = original_op_apply(&m, &one).unwrap();
        let x0 = m.inverse_left(0.5).unwrap();
        let want = 1.0 / m.f_prime(x0) + 0.5;
        assert!((l_one.values()[64] - want).abs() < 1e-12);
    }

    #[test]
    fn operator_identity_residuals() {
        let m = MapModel::lsv(0.5).unwrap();
        let f = GridFn::from_fn(801, |x| (3.0 * x).cos() + 0.5 * x);
        // z = 0: both sides are f
        let r0 = identity_check(&m, 0.0, &f, 200, 801).unwrap();
        assert_eq!(r0, 0.0);
        let r_half = identity_check(&m, 0.5, &f, 200, 801).unwrap();
        assert!(r_half < 1e-8, "z = 0.5 residual {r_half}");
        let r9_small = identity_check(&m, 0.9, &f, 100, 801).unwrap();
        let r9_big = identity_check(&m, 0.9, &f, 200, 801).unwrap();
        assert!(r9_big < 1e-8);
        assert!(r9_big < r9_small, "{r9_big} !< {r9_small}");
    }

    #[test]
    fn identity_at_z_one_on_invariant_density() {
        // f = truncated e: (1 - M)(1 - L_0) e = (1 - M) h ~ 0
        let m = MapModel::lsv(0.4).unwrap();
        let triple = solve(&m, 1.0, 250, 512);
        let e = density_on_grid(&triple, &m, 513, 1e-3, 2_000_000).unwrap();
        let res = identity_check(&m, 1.0, &e, 250, 513);
        let r = res.unwrap();
        assert!(r < 5e-3, "residual {r}");
    }

    #[test]
    fn markov_pressure_derivative_matches_mean() {
        // Markov mode with a geometric law: lambda_z = z/(2-z)
        let m = MapModel::lsv(0.5).unwrap();
        let law = TailLaw::geometric(0.5).unwrap();
        let p = law.materialize(120)[1..].to_vec();
        let lam = |z: f64| -> f64 {
            let op =
                assemble_induced_op(&m, z, 120, 128, &BranchWeights::Constant(p.clone())).unwrap();
            leading_triple(&op, 1e-13, 500).unwrap().lambda
        };
        assert!((lam(0.5) - 1.0 / 3.0).abs() < 1e-11);
        // one-sided derivative of P = log lambda at z = 1 equals M_1 = 2
        let eta: f64 = 1e-4;
        let d1 = (3.0 * lam(1.0).ln() - 4.0 * lam((-eta).exp()).ln()
            + lam((-2.0 * eta).exp()).ln())
            / (2.0 * eta);
        assert!((d1 - 2.0).abs() < 1e-5, "got {d1}");
    }

    #[test]
    fn grid_refinement_stability() {
        let m = MapModel::lsv(0.5).unwrap();
        let l_coarse = solve(&m, 1.0, 150, 512).lambda;
        let l_fine = solve(&m, 1.0, 150, 1024).lambda;
        assert!(
            (l_coarse - l_fine).abs() < 1e-4,
            "{l_coarse} vs {l_fine}"
        );
    }

    #[test]
    fn pressure_guard_rejects_excess_order() {
        let m = MapModel::lsv(2.0).unwrap(); // d = -1/2
        assert!(pressure_and_derivatives(&m, 50, 128, 1e-3, 1).is_err());
        let m = MapModel::lsv(0.8).unwrap(); // d = 0.25 < 1
        assert!(pressure_and_derivatives(&m, 50, 128, 1e-3, 2).is_err());
    }

    #[test]
    fn gibbs_ratios_are_pinched() {
        let m = MapModel::lsv(0.5).unwrap();
        let triple = solve(&m, 1.0, 300, 1024);
        let mut rng = SplitMix64::new(5);
        let mut words = Vec::new();
        for _ in 0..60 {
            let len = 1 + (rng.next_u64() as usize) % 4;
            words.push(
                (0..len)
                    .map(|_| 1 + (rng.next_u64() as usize) % 12)
                    .collect::<Vec<_>>(),
            );
        }
        let ratios = gibbs_ratios(&triple, &m, &words).unwrap();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(lo > 0.0 && hi / lo < 10.0, "ratio spread {}", hi / lo);
    }
}
