use tokattr_core::fixtures::{replacement_outcomes, REPLACEMENT_PROMPT};
use tokattr_core::info::entropy_from_counts;
use tokattr_core::replacement::{
    replacement_experiment, select_modal_response, CandidateSource, ReplacementConfig,
};
use tokattr_core::{PromptResponsePair, ScoringBackend, Strategy, TabularLM, TokenId};

fn run(distinct: usize) -> tokattr_core::replacement::ReplacementRun {
    let m = replacement_outcomes(distinct).unwrap();
    let response = m.generate(&REPLACEMENT_PROMPT, &Strategy::Greedy, 2).unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), REPLACEMENT_PROMPT.to_vec(), response).unwrap();
    replacement_experiment(&m, &pair, 0, &ReplacementConfig::default()).unwrap()
}

#[test]
fn one_outcome_has_zero_entropy() {
    let r = run(1);
    assert_eq!(r.candidate_count, 3);
    assert_eq!(r.frequencies.len(), 1);
    assert_eq!(r.replacement_entropy, 0.0);
    assert_eq!(r.original_response_fraction, 1.0);
}

#[test]
fn two_outcomes_give_ln_two() {
    let r = run(2);
    assert_eq!(r.candidate_count, 2);
    let seqs: Vec<Vec<TokenId>> = r.frequencies.iter().map(|f| f.tokens.clone()).collect();
    assert_eq!(seqs, vec![vec![2, 1], vec![3, 0]]);
    assert!((r.replacement_entropy - 2f64.ln()).abs() < 1e-12);
    assert_eq!(r.original_response_fraction, 0.5);
}

#[test]
fn three_outcomes_give_ln_three() {
    let r = run(3);
    assert_eq!(r.candidate_count, 3);
    assert_eq!(r.frequencies.len(), 3);
    assert!(r.frequencies.iter().all(|f| f.count == 1));
    assert!((r.replacement_entropy - 3f64.ln()).abs() < 1e-12);
    assert!((r.original_response_fraction - 1.0 / 3.0).abs() < 1e-15);
    let by_token: Vec<(TokenId, Vec<TokenId>)> =
        r.candidates.iter().map(|c| (c.token, c.responses[0].clone())).collect();
    assert_eq!(by_token, vec![(0, vec![3, 0]), (1, vec![2, 1]), (2, vec![1, 2])]);
}

#[test]
fn entropy_matches_count_formula() {
    for d in 1..=3 {
        let r = run(d);
        let counts: Vec<u64> = r.frequencies.iter().map(|f| f.count).collect();
        assert_eq!(r.replacement_entropy, entropy_from_counts(&counts).unwrap());
    }
}

#[test]
fn sampled_runs_are_seeded_and_parallel_safe() {
    let m = TabularLM::random_tabular(5, 2, 17).unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), vec![1, 4, 2], vec![0, 3]).unwrap();
    let cfg = |par| ReplacementConfig {
        strategy: Strategy::TopP { p: 0.9, seed: 11 },
        samples_per_candidate: 5,
        parallelism: par,
        ..Default::default()
    };
    let a = replacement_experiment(&m, &pair, 1, &cfg(1)).unwrap();
    let b = replacement_experiment(&m, &pair, 1, &cfg(8)).unwrap();
    assert_eq!(a, b);
    let total: u64 = a.frequencies.iter().map(|f| f.count).sum();
    assert_eq!(total as usize, a.candidate_count * 5);
    let mut other = cfg(1);
    other.strategy = Strategy::TopP { p: 0.9, seed: 12 };
    let c = replacement_experiment(&m, &pair, 1, &other).unwrap();
    assert_eq!(c.candidate_count, a.candidate_count);
}

#[test]
fn prompt_context_source_is_accepted() {
    let m = TabularLM::random_tabular(4, 1, 3).unwrap();
    let pair = PromptResponsePair::from_tokens(m.vocab(), vec![0, 1, 2], vec![3]).unwrap();
    let cfg = ReplacementConfig {
        source: CandidateSource::PromptContext,
        ..Default::default()
    };
    let r = replacement_experiment(&m, &pair, 1, &cfg).unwrap();
    assert!(r.candidates.iter().any(|c| c.token == 1));
    assert!(replacement_experiment(&m, &pair, 3, &cfg).unwrap_err().is_usage());
}

#[test]
fn modal_response_counts_samples() {
    let m = replacement_outcomes(1).unwrap();
    let g = select_modal_response(&m, &REPLACEMENT_PROMPT, &Strategy::Greedy, 4, 2, 2).unwrap();
    assert_eq!(g.tokens, vec![3, 3]);
    assert_eq!((g.count, g.distinct), (4, 1));
    let s = Strategy::TopP { p: 1.0, seed: 4 };
    let a = select_modal_response(&m, &REPLACEMENT_PROMPT, &s, 50, 2, 1).unwrap();
    let b = select_modal_response(&m, &REPLACEMENT_PROMPT, &s, 50, 2, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.count as usize <= 50 && a.distinct >= 1);
}
