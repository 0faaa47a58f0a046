//! Evaluation metrics against scores computed by direct enumeration.

use tokattr_core::attribution::attribute_all;
use tokattr_core::eval::{
    comprehensiveness, comprehensiveness_at, deletion_curve, evaluate, infidelity, k_count, occlusion_baseline,
    ranking, sample_masks, sufficiency, sufficiency_at, EvalTarget,
};
use tokattr_core::fixtures::{eval_fixture, single_cause};
use tokattr_core::{AttributionConfig, PromptResponsePair, ScoringBackend, TabularLM, TokenId};

/// `f(x) = log Pr(r | x)` by summing over the joint table.
fn f_direct(m: &TabularLM, p: &[TokenId], r: &[TokenId]) -> f64 {
    m.oracle_response_prob(p, r).ln()
}

fn replaced(p: &[TokenId], removed: &[bool], base: TokenId) -> Vec<TokenId> {
    p.iter().zip(removed).map(|(&t, &r)| if r { base } else { t }).collect()
}

fn top_k(a: &[f64], k: usize) -> Vec<bool> {
    let mut s = vec![false; a.len()];
    for &i in ranking(a).iter().take(k) {
        s[i] = true;
    }
    s
}

#[test]
fn single_cause_metrics_by_hand() {
    let (m, p, r) = single_cause().unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), p, r).unwrap();
    let t = EvalTarget::for_backend(&m);
    let gap = (0.85f64 / 0.1).ln();
    let a = [gap, 0.0];
    assert!((comprehensiveness(&m, &pair, &a, &t).unwrap() - gap).abs() < 1e-12);
    assert!(sufficiency(&m, &pair, &a, &t).unwrap().abs() < 1e-12);
    let d = deletion_curve(&m, &pair, &a, &t).unwrap();
    assert!((d.full_drop - gap).abs() < 1e-12);
    assert!((d.naopc_full_mask.unwrap() - 1.0).abs() < 1e-12);
    assert!(infidelity(&m, &pair, &a, &t).unwrap() < 1e-24);
    let occ = occlusion_baseline(&m, &pair, &t).unwrap();
    assert!((occ[0] - gap).abs() < 1e-12 && occ[1].abs() < 1e-12);
    // the engine agrees on which token matters
    let recs = attribute_all(&m, &pair, &AttributionConfig::default()).unwrap();
    assert!(recs[0].a_mu > 1.0 && recs[1].a_mu.abs() < 1e-12);
    // a reversed ranking is worse on both ranking metrics
    let bad = [0.0, gap];
    assert!(comprehensiveness(&m, &pair, &bad, &t).unwrap() < 1e-12);
    assert!((sufficiency(&m, &pair, &bad, &t).unwrap() - gap).abs() < 1e-12);
}

#[test]
fn eval_fixture_matches_enumeration() {
    let (m, p, r) = eval_fixture().unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), p.clone(), r.clone()).unwrap();
    let mut t = EvalTarget::for_backend(&m);
    t.perturbation_count = 64;
    t.seed = 5;
    let a: Vec<f64> = attribute_all(&m, &pair, &AttributionConfig::default())
        .unwrap()
        .iter()
        .map(|x| x.a_mu)
        .collect();
    let base = 0;
    let fx = f_direct(&m, &p, &r);
    let drop = |removed: &[bool]| fx - f_direct(&m, &replaced(&p, removed, base), &r);

    let masks = sample_masks(4, t.perturb_rate, t.perturbation_count, t.seed);
    let want_inf = masks
        .iter()
        .map(|mk| {
            let pred: f64 = mk.iter().zip(&a).filter(|(x, _)| **x).map(|(_, v)| v).sum();
            (pred - drop(mk)).powi(2)
        })
        .sum::<f64>()
        / masks.len() as f64;
    assert!((infidelity(&m, &pair, &a, &t).unwrap() - want_inf).abs() < 1e-9);

    let ks: Vec<usize> = t.k_bins.iter().map(|&f| k_count(f, 4)).collect();
    let comp: Vec<f64> = ks.iter().map(|&k| drop(&top_k(&a, k))).collect();
    let suff: Vec<f64> = ks
        .iter()
        .map(|&k| drop(&top_k(&a, k).iter().map(|x| !x).collect::<Vec<_>>()))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((comprehensiveness(&m, &pair, &a, &t).unwrap() - mean(&comp)).abs() < 1e-9);
    assert!((sufficiency(&m, &pair, &a, &t).unwrap() - mean(&suff)).abs() < 1e-9);
    let d = deletion_curve(&m, &pair, &a, &t).unwrap();
    assert!((d.aopc - mean(&comp)).abs() < 1e-9);
    let full = drop(&[true; 4]);
    assert!((d.full_drop - full).abs() < 1e-9);
    assert!((d.naopc_full_mask.unwrap() - (mean(&comp) / full).clamp(-1.0, 1.0)).abs() < 1e-9);
    for k in 0..=4 {
        assert!((comprehensiveness_at(&m, &pair, &a, &t, k).unwrap() - drop(&top_k(&a, k))).abs() < 1e-9);
        let keep: Vec<bool> = top_k(&a, k).iter().map(|x| !x).collect();
        assert!((sufficiency_at(&m, &pair, &a, &t, k).unwrap() - drop(&keep)).abs() < 1e-9);
    }
    let occ = occlusion_baseline(&m, &pair, &t).unwrap();
    for i in 0..4 {
        let mut mk = [false; 4];
        mk[i] = true;
        assert!((occ[i] - drop(&mk)).abs() < 1e-9);
    }
}

#[test]
fn report_is_reproducible_across_parallelism() {
    let (m, p, r) = eval_fixture().unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), p, r).unwrap();
    let mut t = EvalTarget::for_backend(&m);
    let a = [0.4, -0.1, 0.2, 0.0];
    let one = evaluate(&m, &pair, "test", &a, &t).unwrap();
    t.parallelism = 8;
    assert_eq!(one, evaluate(&m, &pair, "test", &a, &t).unwrap());
}

#[test]
fn masked_positions_index_into_prompt() {
    let (m, p, r) = eval_fixture().unwrap();
    let pair = PromptResponsePair::with_mask(
        tokattr_core::TokenSequence::new(p.clone(), m.vocab()).unwrap(),
        tokattr_core::TokenSequence::new(r.clone(), m.vocab()).unwrap(),
        vec![1, 3],
    )
    .unwrap();
    let t = EvalTarget::for_backend(&m);
    let occ = occlusion_baseline(&m, &pair, &t).unwrap();
    assert_eq!(occ.len(), 2);
    let fx = f_direct(&m, &p, &r);
    let mut q = p.clone();
    q[3] = 0;
    assert!((occ[1] - (fx - f_direct(&m, &q, &r))).abs() < 1e-9);
}
