//! The renewal Markov chain used as an exactly solvable reference model.
//!
//! Inter-passage times are i.i.d. with law `{p_n}`; renewal epochs are their
//! partial sums. The empirical renewal frequencies converge to the exact
//! renewal sequence, the pressure is the plain generating function of the
//! law, and the stationary measure has the closed form `pi_k = sum_{l>=k} p_l`.

use crate::error::{LabError, Result};
use crate::rng::SplitMix64;
use crate::tail::{power_tail_sum, TailLaw};

/// Monte Carlo configuration. Identical seeds reproduce identical outputs
/// bit-for-bit regardless of how trials are chunked.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub tail: TailLaw,
    pub seed: u64,
    pub trials: usize,
}

/// Empirical renewal frequencies with confidence half-widths.
#[derive(Debug, Clone)]
pub struct RenewalEstimate {
    /// `u_hat[n]` = fraction of trials with a renewal at time `n`.
    pub u_hat: Vec<f64>,
    /// 95% normal-approximation half-widths.
    pub ci: Vec<f64>,
    pub trials: usize,
}

/// Inverse-CDF sampler over the law's explicit atoms plus its power tail.
#[derive(Debug, Clone)]
pub struct TailSampler {
    /// Cumulative masses of the explicit atoms.
    cum: Vec<f64>,
    tail_alpha: f64,
    tail_c: f64,
    /// Mass of the declared tail.
    tail_mass: f64,
    k: usize,
}

impl TailSampler {
    pub fn new(law: &TailLaw) -> Result<Self> {
        let total = law.total_mass();
        if (total - 1.0).abs() > 1e-6 {
            return Err(LabError::InvalidTail(format!(
                "sampler needs a normalized law, total mass {total}"
            )));
        }
        let mut cum = Vec::with_capacity(law.k());
        let mut acc = 0.0;
        for &p in law.explicit_probs() {
            acc += p;
            cum.push(acc);
        }
        let (tail_alpha, tail_c) = law
            .tail_descriptor()
            .map(|t| (t.alpha, t.c))
            .unwrap_or((2.0, 0.0));
        Ok(TailSampler {
            cum,
            tail_alpha,
            tail_c,
            tail_mass: law.declared_tail_mass(),
            k: law.k(),
        })
    }

    /// Draws one inter-passage time.
    pub fn draw(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let explicit = *self.cum.last().unwrap_or(&0.0);
        if u < explicit || self.tail_mass == 0.0 {
            // binary search for the first cumulative >= u
            let mut lo = 0usize;
            let mut hi = self.cum.len() - 1;
            while lo < hi {
                let mid = (lo + hi) / 2;
                if self.cum[mid] >= u {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            return lo + 1;
        }
        // tail: find the smallest n > K with sum_{K<j<=n} p_j >= u - explicit,
        // i.e. T(n) <= T(K) - (u - explicit) with T(n) = c * sum_{j>n} j^-a
        let v = (self.tail_mass - (u - explicit)).max(0.0) / self.tail_c;
        let a = self.tail_alpha;
        // continuous first guess from T(n) ~ n^(1-a)/(a-1)
        let mut n = ((v * (a - 1.0)).powf(1.0 / (1.0 - a)).ceil() as usize).max(self.k + 1);
        // correct by exact discrete tail comparisons
        while power_tail_sum(a, n + 1) > v && n < usize::MAX / 2 {
            n += 1;
        }
        while n > self.k + 1 && power_tail_sum(a, n) <= v {
            n -= 1;
        }
        n
    }
}

/// Simulates i.i.d. inter-passage times and marks renewal epochs up to
/// `n_max`. Trial `t` uses the derived stream `mix64(seed ^ t)`, so results
/// do not depend on execution order and parallel chunking is safe.
pub fn simulate_renewal(cfg: &ChainConfig, n_max: usize) -> Result<RenewalEstimate> {
    if cfg.trials == 0 {
        return Err(LabError::domain("need at least one trial"));
    }
    let sampler = TailSampler::new(&cfg.tail)?;
    let counts = simulate_counts(&sampler, cfg.seed, 0, cfg.trials, n_max);
    let trials = cfg.trials as f64;
    let mut u_hat = vec![0.0; n_max + 1];
    let mut ci = vec![0.0; n_max + 1];
    u_hat[0] = 1.0;
    for n in 1..=n_max {
        let p = counts[n] as f64 / trials;
        u_hat[n] = p;
        ci[n] = 1.96 * (p * (1.0 - p) / trials).sqrt();
    }
    Ok(RenewalEstimate {
        u_hat,
        ci,
        trials: cfg.trials,
    })
}

/// Counts renewals at each epoch for a contiguous block of trials (exposed so
/// callers can chunk across threads and sum the per-chunk counts in order).
pub fn simulate_counts(
    sampler: &TailSampler,
    seed: u64,
    first_trial: usize,
    n_trials: usize,
    n_max: usize,
) -> Vec<u64> {
    let mut counts = vec![0u64; n_max + 1];
    for t in first_trial..first_trial + n_trials {
        let mut rng = SplitMix64::for_trial(seed, t as u64);
        let mut epoch = 0usize;
        loop {
            epoch += sampler.draw(&mut rng);
            if epoch > n_max {
                break;
            }
            counts[epoch] += 1;
        }
    }
    counts
}

/// Pressure of the Markov approximation: the generating function
/// `sum_k z^k p_k` of the law (exact partial sum plus tail extrapolation).
pub fn markov_pressure(law: &TailLaw, z: f64) -> Result<f64> {
    if !(z > 0.0 && z <= 1.0) {
        return Err(LabError::domain(format!("z = {z} outside (0, 1]")));
    }
    Ok(law.moment(0.0, z)?.value)
}

/// Stationary weights `pi_k = sum_{l >= k} p_l` for `k = 1..k_max`; their sum
/// converges to `M_1` (finite exactly when the degree is positive).
pub fn stationary_measure(law: &TailLaw, k_max: usize) -> Vec<f64> {
    (1..=k_max).map(|k| law.mass_beyond(k - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renewal::renewal_sequence;

    #[test]
    fn deterministic_law_renews_every_step() {
        let cfg = ChainConfig {
            tail: TailLaw::from_probs(vec![1.0]).unwrap(),
            seed: 1,
            trials: 100,
        };
        let est = simulate_renewal(&cfg, 20).unwrap();
        for n in 0..=20 {
            assert_eq!(est.u_hat[n], 1.0, "n = {n}");
        }
    }

    #[test]
    fn geometric_frequencies_match_closed_form() {
        let cfg = ChainConfig {
            tail: TailLaw::geometric(0.5).unwrap(),
            seed: 42,
            trials: 200_000,
        };
        let est = simulate_renewal(&cfg, 50).unwrap();
        let bound = 3.0 * (0.25f64 / 200_000.0).sqrt();
        let mut misses = 0;
        for n in 1..=50 {
            if (est.u_hat[n] - 0.5).abs() >= bound {
                misses += 1;
            }
        }
        assert!(misses <= 2, "{misses} epochs outside 3 sigma");
    }

    #[test]
    fn power_tail_simulation_tracks_exact_recurrence() {
        let law = TailLaw::power(3.0).unwrap();
        let exact = renewal_sequence(&law, 40).unwrap();
        let cfg = ChainConfig {
            tail: law,
            seed: 7,
            trials: 150_000,
        };
        let est = simulate_renewal(&cfg, 40).unwrap();
        let mut misses = 0;
        for n in 1..=40 {
            let sigma = (exact.a[n] * (1.0 - exact.a[n]) / 150_000.0).sqrt();
            if (est.u_hat[n] - exact.a[n]).abs() >= 3.0 * sigma {
                misses += 1;
            }
        }
        assert!(misses <= 2, "{misses} epochs outside 3 sigma");
    }

    #[test]
    fn simulation_is_seed_deterministic_and_chunkable() {
        let law = TailLaw::power(2.5).unwrap();
        let sampler = TailSampler::new(&law).unwrap();
        let whole = simulate_counts(&sampler, 9, 0, 1000, 30);
        let mut parts = simulate_counts(&sampler, 9, 0, 400, 30);
        let rest = simulate_counts(&sampler, 9, 400, 600, 30);
        for (a, b) in parts.iter_mut().zip(rest.iter()) {
            *a += b;
        }
        assert_eq!(whole, parts);
    }

    #[test]
    fn sampler_tail_draws_follow_power_law() {
        // empirical mass beyond K should match the declared tail mass
        let law = TailLaw::power(2.0).unwrap();
        let k = law.k();
        let sampler = TailSampler::new(&law).unwrap();
        let mut rng = SplitMix64::new(3);
        let n = 200_000;
        let mut deep = 0usize;
        for _ in 0..n {
            if sampler.draw(&mut rng) > k {
                deep += 1;
            }
        }
        let want = law.declared_tail_mass();
        let got = deep as f64 / n as f64;
        assert!(
            (got - want).abs() < 4.0 * (want / n as f64).sqrt(),
            "{got} vs {want}"
        );
    }

    #[test]
    fn pressure_matches_generating_function() {
        let law = TailLaw::geometric(0.5).unwrap();
        assert!((markov_pressure(&law, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-13);
        assert!((markov_pressure(&law, 1.0).unwrap() - 1.0).abs() < 1e-11);
        // strictly increasing in z
        let mut prev = 0.0;
        for i in 1..=10 {
            let z = i as f64 / 10.0;
            let v = markov_pressure(&law, z).unwrap();
            assert!(v > prev);
            prev = v;
        }
        // one-sided derivative at z = 1 approaches M_1
        let eta = 1e-5;
        let d = (markov_pressure(&law, 1.0).unwrap()
            - markov_pressure(&law, 1.0 - eta).unwrap())
            / eta;
        assert!((d - 2.0).abs() < 1e-3, "derivative {d}");
    }

    #[test]
    fn stationary_weights() {
        let law = TailLaw::geometric(0.5).unwrap();
        let pi = stationary_measure(&law, 30);
        for (i, &p) in pi.iter().enumerate() {
            let want = 2f64.powi(-(i as i32));
            assert!((p - want).abs() < 1e-12, "pi_{}", i + 1);
        }
        let total: f64 = stationary_measure(&law, 200).iter().sum();
        assert!((total - 2.0).abs() < 1e-10);
        // infinite invariant measure when the degree is nonpositive
        let heavy = TailLaw::power(2.0).unwrap();
        let partial: f64 = stationary_measure(&heavy, 50_000).iter().sum();
        let partial_small: f64 = stationary_measure(&heavy, 5_000).iter().sum();
        assert!(partial > partial_small + 0.5, "partial sums must diverge");
    }
}
