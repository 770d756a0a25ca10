//! Property tests for the renewal arithmetic.

use intermittency_lab::renewal::{
    b_sequence, gf_eval, renewal_identity_residual, renewal_sequence, renewal_sequence_direct,
    renewal_sequence_fft, tail_sums,
};
use intermittency_lab::tail::TailLaw;
use proptest::prelude::*;

fn normalized_law() -> impl Strategy<Value = TailLaw> {
    prop::collection::vec(1e-6..1.0f64, 1..40).prop_map(|mut probs| {
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        TailLaw::from_probs(probs).expect("normalized law")
    })
}

fn tailed_law() -> impl Strategy<Value = TailLaw> {
    (prop::collection::vec(0.0..0.02f64, 0..12), 1.1..4.0f64).prop_map(|(probs, alpha)| {
        TailLaw::with_power_tail(probs, alpha, None).expect("tailed law")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn renewal_identity_for_any_normalized_law(law in normalized_law()) {
        let n = 512;
        let seq = renewal_sequence(&law, n).unwrap();
        let (d, _) = tail_sums(&law, n).unwrap();
        let res = renewal_identity_residual(&d, &seq.a, n);
        prop_assert!(res < 1e-10, "residual {res}");
        // a_n stays inside [0, 1] for a normalized law
        for (i, &a) in seq.a.iter().enumerate() {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a), "a_{i} = {a}");
        }
    }

    #[test]
    fn renewal_identity_with_declared_tails(law in tailed_law()) {
        let n = 400;
        let seq = renewal_sequence(&law, n).unwrap();
        let (d, d1) = tail_sums(&law, n).unwrap();
        let res = renewal_identity_residual(&d, &seq.a, n);
        prop_assert!(res < 1e-10, "residual {res}");
        // tail sums are nonnegative and nonincreasing
        for w in d.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15 && w[1] >= -1e-15);
        }
        if d1[0].is_finite() {
            for w in d1.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15);
            }
        }
    }

    #[test]
    fn convolution_routes_agree(law in normalized_law()) {
        let n = 700;
        let a = renewal_sequence_direct(&law, n).unwrap();
        let b = renewal_sequence_fft(&law, n).unwrap();
        for i in 0..=n {
            prop_assert!((a.a[i] - b.a[i]).abs() < 1e-10, "n = {i}");
        }
    }

    #[test]
    fn kac_formula(law in normalized_law()) {
        // sum of tail sums telescopes to the first moment
        let n = 256;
        let (d, d1) = tail_sums(&law, n).unwrap();
        let m1 = law.first_moment().unwrap();
        let total: f64 = d.iter().sum::<f64>() + d1[n];
        prop_assert!((total - m1).abs() <= 1e-10 * m1.max(1.0), "{total} vs {m1}");
    }

    #[test]
    fn generating_function_identity(law in tailed_law(), z in 0.0..0.95f64) {
        let g = gf_eval(&law, z).unwrap();
        prop_assert!(g.identity_residual < 1e-10, "residual {}", g.identity_residual);
        prop_assert!(g.a >= 1.0 - 1e-12);
    }

    #[test]
    fn centered_sequence_matches_definition(law in normalized_law()) {
        let seq = renewal_sequence(&law, 128).unwrap();
        let m1 = seq.m1.unwrap();
        let b = b_sequence(&seq).unwrap();
        for i in 0..=128 {
            prop_assert!((b[i] - (m1 * seq.a[i] - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_monotone_in_order(law in normalized_law(), g1 in 0.0..3.0f64, dg in 0.0..2.0f64) {
        let lo = law.moment(g1, 1.0).unwrap();
        let hi = law.moment(g1 + dg, 1.0).unwrap();
        prop_assert!(hi.value >= lo.value - 1e-12);
    }
}
