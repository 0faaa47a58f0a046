use proptest::prelude::*;
use tokattr_core::attribution::attribution_score;
use tokattr_core::dist::top_mass_prefix;
use tokattr_core::info::entropy_from_counts;
use tokattr_core::{entropy, kl_divergence, log_sum_exp, AttributionConfig, LogDistribution, PromptResponsePair, ScoringBackend, TabularLM};

fn probs(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..10.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn lse_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
        let a = log_sum_exp(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted).unwrap() - (a + c)).abs() < 1e-9 * (1.0 + c.abs()));
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= max && a <= max + (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn lse_tolerates_huge_magnitudes(v in prop::collection::vec(-1e300f64..1e300, 1..8)) {
        prop_assert!(!log_sum_exp(&v).unwrap().is_nan());
    }

    #[test]
    fn entropy_is_bounded(p in probs(1..16)) {
        let d = LogDistribution::from_probs(&p, 1e-9).unwrap();
        let h = entropy(&d).unwrap();
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in probs(2..10), q in probs(2..10)) {
        let n = p.len().min(q.len());
        let renorm = |v: &[f64]| { let s: f64 = v[..n].iter().sum(); v[..n].iter().map(|x| x / s).collect::<Vec<_>>() };
        let dp = LogDistribution::from_probs(&renorm(&p), 1e-9).unwrap();
        let dq = LogDistribution::from_probs(&renorm(&q), 1e-9).unwrap();
        prop_assert!(kl_divergence(&dp, &dq).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&dp, &dp).unwrap().abs() < 1e-12);
    }

    #[test]
    fn count_entropy_matches_plugin(counts in prop::collection::vec(1u64..50, 1..10)) {
        let n: u64 = counts.iter().sum();
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let d = LogDistribution::from_probs(&p, 1e-9).unwrap();
        prop_assert!((entropy_from_counts(&counts).unwrap() - entropy(&d).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn top_mass_prefix_reaches_tau(p in probs(1..12), tau in 0.05f64..1.0) {
        let lps: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let kept = top_mass_prefix(&lps, tau, false);
        let mass: f64 = kept.iter().map(|&i| p[i]).sum();
        prop_assert!(mass >= tau - 1e-9);
        // minimal: dropping the last kept entry falls below tau
        let without_last: f64 = kept[..kept.len() - 1].iter().map(|&i| p[i]).sum();
        prop_assert!(without_last < tau + 1e-9);
    }

    #[test]
    fn truncated_mass_is_preserved(p in probs(2..12), tau in 0.1f64..1.0) {
        let d = LogDistribution::from_probs(&p, 1e-9).unwrap();
        let t = d.truncate_to_mass(tau).unwrap();
        prop_assert!(t.total_log_mass().abs() < 1e-9);
        prop_assert!(t.entries().len() <= p.len());
    }

    #[test]
    fn random_models_match_oracle(seed in 0u64..10_000, plen in 1usize..5, rlen in 1usize..3, v in 2usize..6) {
        let m = TabularLM::random_tabular(v, 2, seed).unwrap();
        let toks = m.generate(&[], &tokattr_core::Strategy::TopP { p: 1.0, seed }, plen + rlen).unwrap();
        prop_assume!(toks.len() == plen + rlen);
        let pair = PromptResponsePair::from_tokens(m.vocab(), toks[..plen].to_vec(), toks[plen..].to_vec()).unwrap();
        for mu in 0..plen {
            let s = attribution_score(&m, &pair, mu, &AttributionConfig::default()).unwrap();
            let o = m.oracle_attribution(pair.prompt(), pair.response(), mu).unwrap();
            prop_assert!((s.a_mu - o).abs() < 1e-9);
        }
    }
}
