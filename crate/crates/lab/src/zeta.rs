//! Periodic-orbit partition functions and the two-variable zeta function.
//!
//! The grand partition function at induced period `ell` sums, over words
//! `(k_1..k_ell)` of inverse branches, the weight `z^{sum k_i}` times the
//! derivative of the composed contraction `G_{k_1} . ... . G_{k_ell}` at its
//! unique fixed point. The two-variable zeta function
//! `zeta_2(w, z) = exp sum_l (w^l / l) Xi_l(z)` ties the induced system
//! (`z = 1`) to the original map (`w = 1`), where the direct side is computed
//! from period-`n` points of the map itself plus the isolated contribution of
//! the indifferent fixed point.
//!
//! Word enumeration walks a tree whose nodes carry the image interval of the
//! composed branches; for `z < 1` subtrees are pruned once their exact
//! interval weight times a geometric completion bound drops below threshold,
//! which keeps long-period evaluations tractable without visibly perturbing
//! the result.

use crate::error::{LabError, Result};
use crate::map::MapModel;
use crate::operator::BranchWeights;

/// Enumeration and convergence parameters.
#[derive(Debug, Clone)]
pub struct ZetaConfig {
    /// Induced-symbol cutoff `N`.
    pub n_symbols: usize,
    /// Max induced period `L`.
    pub max_period: usize,
    pub z: f64,
    pub w: f64,
    /// Fixed-point tolerance.
    pub fp_tol: f64,
    /// Subtree pruning threshold (0 disables pruning; the full enumeration
    /// guard `N^L <= 1e7` then applies).
    pub prune: f64,
    /// Visited-node guard for pruned walks.
    pub node_guard: usize,
}

impl Default for ZetaConfig {
    fn default() -> Self {
        ZetaConfig {
            n_symbols: 8,
            max_period: 6,
            z: 1.0,
            w: 1.0,
            fp_tol: 1e-13,
            prune: 0.0,
            node_guard: 20_000_000,
        }
    }
}

/// Result of one grand-partition evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GrandPartition {
    pub value: f64,
    /// Accepted words (leaves of the enumeration).
    pub leaves: usize,
    /// Conservative bound on the pruned mass.
    pub pruned_bound: f64,
}

/// Distortion safety factor in pruning bounds.
const DIST_SAFETY: f64 = 8.0;

struct Walker<'a> {
    m: &'a MapModel,
    mode: &'a BranchWeights,
    n_symbols: usize,
    ell: usize,
    zpow: Vec<f64>,
    /// Per-symbol completion bound `sum_k z^k sup w_k`, taken to powers.
    comp_bound: Vec<f64>,
    fp_tol: f64,
    prune: f64,
    node_guard: usize,
    nodes: usize,
    leaves: usize,
    acc: f64,
    pruned: f64,
    word: Vec<usize>,
}

impl Walker<'_> {
    fn leaf(&mut self, lo: f64, hi: f64, zp: f64, wprod: f64) -> Result<()> {
        self.leaves += 1;
        match self.mode {
            BranchWeights::Constant(_) => {
                self.acc += zp * wprod;
            }
            BranchWeights::Derivative => {
                // fixed point of the composed contraction, started from the
                // midpoint of its image interval
                let mut x = 0.5 * (lo + hi);
                let mut converged = false;
                for _ in 0..500 {
                    let next = self.compose(x)?;
                    if (next - x).abs() <= self.fp_tol {
                        x = next;
                        converged = true;
                        break;
                    }
                    x = next;
                }
                if !converged {
                    return Err(LabError::numerical(
                        format!("periodic point iteration stalled for word {:?}", self.word),
                        f64::NAN,
                    ));
                }
                // derivative along the cycle
                let mut d = 1.0;
                let mut u = x;
                for i in (0..self.word.len()).rev() {
                    let (v, dv) = self.m.induced_inverse_branch(self.word[i], u)?;
                    d *= dv;
                    u = v;
                }
                self.acc += zp * d;
            }
        }
        Ok(())
    }

    fn compose(&self, x: f64) -> Result<f64> {
        let mut u = x;
        for i in (0..self.word.len()).rev() {
            u = self.m.induced_inverse_branch(self.word[i], u)?.0;
        }
        Ok(u)
    }

    fn walk(&mut self, depth: usize, lo: f64, hi: f64, zp: f64, wprod: f64) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.node_guard {
            return Err(LabError::Resource(format!(
                "periodic-orbit enumeration exceeded {} nodes",
                self.node_guard
            )));
        }
        if depth == self.ell {
            return self.leaf(lo, hi, zp, wprod);
        }
        // all children share one backward orbit per interval endpoint
        let trail_lo = self.m.inverse_branch_trail(lo, self.n_symbols)?;
        let trail_hi = self.m.inverse_branch_trail(hi, self.n_symbols)?;
        let rem = self.ell - depth - 1;
        for k in 1..=self.n_symbols {
            let l2 = trail_lo.points[k - 1];
            let h2 = trail_hi.points[k - 1];
            let zp2 = zp * self.zpow[k];
            let wprod2 = match self.mode {
                BranchWeights::Constant(p) => wprod * p[k - 1],
                BranchWeights::Derivative => wprod,
            };
            if self.prune > 0.0 {
                let bound = match self.mode {
                    BranchWeights::Derivative => {
                        zp2 * (h2 - l2).abs() * DIST_SAFETY * self.comp_bound[rem]
                    }
                    BranchWeights::Constant(_) => zp2 * wprod2 * self.comp_bound[rem],
                };
                if bound < self.prune {
                    match self.mode {
                        // derivative weights decay monotonically in k
                        BranchWeights::Derivative => {
                            self.pruned += bound * (self.n_symbols - k + 1) as f64;
                            break;
                        }
                        BranchWeights::Constant(_) => {
                            self.pruned += bound;
                            continue;
                        }
                    }
                }
            }
            self.word.push(k);
            self.walk(depth + 1, l2, h2, zp2, wprod2)?;
            self.word.pop();
        }
        Ok(())
    }
}

/// Per-symbol completion bound `B(z) = sum_{k<=N} z^k sup_y w_k(y)`.
fn completion_bound(m: &MapModel, mode: &BranchWeights, n_symbols: usize, z: f64) -> Result<f64> {
    let mut b = 0.0;
    match mode {
        BranchWeights::Constant(p) => {
            for (k, item) in p.iter().enumerate().take(n_symbols) {
                b += z.powi(k as i32 + 1) * item;
            }
        }
        BranchWeights::Derivative => {
            // branch derivatives are monotone enough that endpoint samples
            // bracket the sup up to a modest factor, covered by DIST_SAFETY
            let t0 = m.inverse_branch_trail(0.0, n_symbols)?;
            let t1 = m.inverse_branch_trail(1.0, n_symbols)?;
            let tm = m.inverse_branch_trail(0.5, n_symbols)?;
            for k in 1..=n_symbols {
                let sup = t0.derivs[k - 1]
                    .max(t1.derivs[k - 1])
                    .max(tm.derivs[k - 1]);
                b += z.powi(k as i32) * sup;
            }
        }
    }
    Ok(b)
}

/// Grand partition function at induced period `ell`.
pub fn grand_partition(
    m: &MapModel,
    mode: &BranchWeights,
    cfg: &ZetaConfig,
    ell: usize,
) -> Result<GrandPartition> {
    if ell == 0 || ell > cfg.max_period {
        return Err(LabError::domain(format!(
            "period {ell} outside 1..={}",
            cfg.max_period
        )));
    }
    if !(0.0..=1.0).contains(&cfg.z) {
        return Err(LabError::domain(format!("z = {} outside [0, 1]", cfg.z)));
    }
    if let BranchWeights::Constant(p) = mode {
        if p.len() < cfg.n_symbols {
            return Err(LabError::domain("constant weights shorter than symbol cutoff"));
        }
    }
    if cfg.prune == 0.0 {
        let count = (cfg.n_symbols as f64).powi(ell as i32);
        if count > 1e7 {
            return Err(LabError::Resource(format!(
                "unpruned enumeration of {}^{} words exceeds the 1e7 guard",
                cfg.n_symbols, ell
            )));
        }
    }
    if cfg.z == 0.0 {
        return Ok(GrandPartition {
            value: 0.0,
            leaves: 0,
            pruned_bound: 0.0,
        });
    }
    let b = completion_bound(m, mode, cfg.n_symbols, cfg.z)?;
    let comp_bound: Vec<f64> = (0..=ell).map(|r| b.powi(r as i32)).collect();
    let zpow: Vec<f64> = (0..=cfg.n_symbols).map(|k| cfg.z.powi(k as i32)).collect();
    let mut w = Walker {
        m,
        mode,
        n_symbols: cfg.n_symbols,
        ell,
        zpow,
        comp_bound,
        fp_tol: cfg.fp_tol,
        prune: cfg.prune,
        node_guard: cfg.node_guard,
        nodes: 0,
        leaves: 0,
        acc: 0.0,
        pruned: 0.0,
        word: Vec::with_capacity(ell),
    };
    w.walk(0, 0.0, 1.0, 1.0, 1.0)?;
    Ok(GrandPartition {
        value: w.acc,
        leaves: w.leaves,
        pruned_bound: w.pruned,
    })
}

/// Truncated two-variable zeta function with a geometric remainder estimate.
#[derive(Debug, Clone)]
pub struct Zeta2 {
    pub value: f64,
    pub log_value: f64,
    /// `Xi_l(z)` for `l = 1..=L`.
    pub xi: Vec<f64>,
    /// Estimated truncation remainder on `log zeta_2`.
    pub remainder: f64,
}

/// `zeta_2(w, z) = exp sum_{l<=L} (w^l / l) Xi_l(z)`.
pub fn zeta2_eval(m: &MapModel, mode: &BranchWeights, cfg: &ZetaConfig) -> Result<Zeta2> {
    if !(0.0..=1.0).contains(&cfg.w) {
        return Err(LabError::domain(format!("w = {} outside [0, 1]", cfg.w)));
    }
    let mut xi = Vec::with_capacity(cfg.max_period);
    let mut log_sum = 0.0;
    for ell in 1..=cfg.max_period {
        let gp = grand_partition(m, mode, cfg, ell)?;
        xi.push(gp.value);
        log_sum += cfg.w.powi(ell as i32) / ell as f64 * gp.value;
    }
    // geometric completion: growth rate from the computed Xi values
    let growth = xi
        .iter()
        .enumerate()
        .map(|(i, &x)| x.max(0.0).powf(1.0 / (i + 1) as f64))
        .fold(0.0f64, f64::max);
    let wg = cfg.w * growth;
    if wg >= 1.0 && cfg.w > 0.0 {
        return Err(LabError::domain(format!(
            "series divergence guard: w * max Xi_l^(1/l) = {wg} >= 1"
        )));
    }
    let remainder = if cfg.w == 0.0 {
        0.0
    } else {
        wg.powi(cfg.max_period as i32 + 1) / ((cfg.max_period + 1) as f64 * (1.0 - wg))
    };
    Ok(Zeta2 {
        value: log_sum.exp(),
        log_value: log_sum,
        xi,
        remainder,
    })
}

/// Direct partition function of the original map: period-`n` points located
/// through composed inverse branches (binary itineraries), weighted by the
/// reciprocal cycle derivative, plus 1 for the indifferent fixed point.
pub fn direct_partition(m: &MapModel, n: usize, fp_tol: f64) -> Result<f64> {
    if n == 0 || n > 24 {
        return Err(LabError::domain("direct partition period must be in 1..=24"));
    }
    let mut q = 1.0; // the indifferent fixed point
    for word in 1u32..(1u32 << n) {
        // fixed point of x -> F_{w_0}^{-1}(F_{w_1}^{-1}(..(x)..))
        let bit = |i: usize| -> u8 { ((word >> (n - 1 - i)) & 1) as u8 };
        let mut x = 0.5f64;
        let mut converged = false;
        for _ in 0..500 {
            let mut u = x;
            for i in (0..n).rev() {
                u = m.inverse_branch(bit(i), u)?;
            }
            if (u - x).abs() <= fp_tol {
                x = u;
                converged = true;
                break;
            }
            x = u;
        }
        if !converged {
            return Err(LabError::numerical(
                format!("periodic point of itinerary {word:b} did not converge"),
                f64::NAN,
            ));
        }
        // weight = prod_k 1/F'(F^k x) via the composed inverse derivative
        let mut d = 1.0;
        let mut u = x;
        for i in (0..n).rev() {
            u = m.inverse_branch(bit(i), u)?;
            d *= match bit(i) {
                0 => 1.0 / m.f_prime(u),
                _ => 1.0 / m.right_slope(),
            };
        }
        q += d;
    }
    Ok(q)
}

/// Consistency report between the two-variable zeta function at `w = 1` and
/// the direct zeta function of the map.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub z: f64,
    /// `log zeta_2(1, z)` (truncated at `L`).
    pub log_zeta2: f64,
    /// `log(1/(1-z)) + sum_{n<=n_max} z^n Q_n / n`.
    pub log_direct: f64,
    pub gap: f64,
    pub q: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Compares `log zeta_2(1, z)` with the direct series; both sides truncated.
pub fn zeta_consistency(m: &MapModel, cfg: &ZetaConfig, n_max: usize) -> Result<ConsistencyReport> {
    if cfg.z > 0.9 {
        return Err(LabError::domain(
            "consistency check needs z <= 0.9 so both truncations converge",
        ));
    }
    let mode = BranchWeights::Derivative;
    let mut cfg1 = cfg.clone();
    cfg1.w = 1.0;
    let z2 = zeta2_eval(m, &mode, &cfg1)?;
    // zeta_2(1, z) = (1 - z) zeta(phi, z), so the direct side carries the
    // factor log(1 - z) next to the cycle series
    let mut direct = (1.0 - cfg.z).ln();
    let mut q = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let qn = direct_partition(m, n, cfg.fp_tol)?;
        direct += cfg.z.powi(n as i32) * qn / n as f64;
        q.push(qn);
    }
    Ok(ConsistencyReport {
        z: cfg.z,
        log_zeta2: z2.log_value,
        log_direct: direct,
        gap: (z2.log_value - direct).abs(),
        q,
        xi: z2.xi,
    })
}
