//! Response stability under token replacement.
//!
//! For a prompt position, every high-probability alternative token is
//! substituted in turn and a fresh response is decoded. The spread of the
//! resulting exact responses is summarized by its entropy and by the share
//! that reproduce the original response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{ScoringBackend, Strategy};
use crate::context::contextual_dists;
use crate::dist::{top_mass_prefix, LogDistribution};
use crate::error::{Error, Result};
use crate::info::entropy_from_counts;
use crate::parallel::par_map;
use crate::vocab::{PromptResponsePair, TokenId};

/// Probability-descending tokens whose cumulative mass first reaches `tau`.
/// Equal probabilities are ordered by ascending token ID.
pub fn top_mass_candidates(dist: &LogDistribution, tau: f64) -> Vec<TokenId> {
    let lps: Vec<f64> = dist.entries().iter().map(|e| e.1).collect();
    let mut picked: Vec<TokenId> = top_mass_prefix(&lps, tau, false)
        .into_iter()
        .map(|i| dist.entries()[i].0)
        .collect();
    if !dist.is_dense() {
        // sparse entries arrive in backend order; re-sort by (prob desc, id asc)
        let lp_of = |t: TokenId| dist.log_prob(t).unwrap_or(f64::NEG_INFINITY);
        picked.sort_by(|&a, &b| lp_of(b).partial_cmp(&lp_of(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    }
    picked
}

/// Where replacement candidates are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// `next_dist(p_{<μ})`, the prior factor of the Bayes weight.
    Prior,
    /// The prompt-only contextual distribution at `μ`.
    PromptContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementConfig {
    pub top_mass: f64,
    pub strategy: Strategy,
    /// Regenerations per candidate; only meaningful for top-p.
    pub samples_per_candidate: usize,
    /// Tokens to decode; defaults to the original response length.
    pub max_new: Option<usize>,
    pub source: CandidateSource,
    pub parallelism: usize,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        Self {
            top_mass: 0.9,
            strategy: Strategy::Greedy,
            samples_per_candidate: 1,
            max_new: None,
            source: CandidateSource::Prior,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub token: TokenId,
    /// Whether the token was inside the top-mass set.
    pub in_mass: bool,
    pub responses: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFrequency {
    pub tokens: Vec<TokenId>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementRun {
    pub position: usize,
    pub candidates: Vec<CandidateOutcome>,
    /// Distinct responses, most frequent first, then lexicographic.
    pub frequencies: Vec<ResponseFrequency>,
    pub replacement_entropy: f64,
    pub original_response_fraction: f64,
    pub candidate_count: usize,
    /// The original prompt token was inside the top-mass set.
    pub original_in_mass: bool,
}

/// SplitMix64 finalizer; derives independent seeds from a base seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replacement_experiment(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    position: usize,
    config: &ReplacementConfig,
) -> Result<ReplacementRun> {
    if position >= pair.prompt().len() {
        return Err(Error::usage(format!("position {position} outside prompt")));
    }
    if !(config.top_mass > 0.0 && config.top_mass <= 1.0) {
        return Err(Error::usage(format!("top mass {} outside (0, 1]", config.top_mass)));
    }
    if config.samples_per_candidate == 0 || config.parallelism == 0 {
        return Err(Error::usage("sample count and parallelism must be positive"));
    }
    let dist = match config.source {
        CandidateSource::Prior => backend.next_dist(&pair.prompt()[..position], 1.0)?,
        CandidateSource::PromptContext => contextual_dists(backend, pair, position, 1.0)?.q_p,
    };
    let original = pair.prompt()[position];
    let mut tokens = top_mass_candidates(&dist, config.top_mass);
    let original_in_mass = tokens.contains(&original);
    if !original_in_mass {
        tokens.push(original);
    }
    let samples = match config.strategy {
        Strategy::Greedy => 1,
        Strategy::TopP { .. } => config.samples_per_candidate,
    };
    let max_new = config.max_new.unwrap_or(pair.response().len());
    let work: Vec<(TokenId, u64)> = tokens
        .iter()
        .flat_map(|&t| (0..samples as u64).map(move |s| (t, s)))
        .collect();
    let base_seed = match config.strategy {
        Strategy::TopP { seed, .. } => seed,
        Strategy::Greedy => 0,
    };
    let generated = par_map(&work, config.parallelism, |&(t, s)| {
        let prompt = pair.prompt_with(position, t);
        let strategy = config.strategy.reseeded(derive_seed(base_seed, t as u64, s));
        backend
            .generate(&prompt, &strategy, max_new)
            .map_err(|e| e.at_position(position))
    });
    let mut it = generated.into_iter();
    let mut candidates = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let responses = it.by_ref().take(samples).collect::<Result<Vec<_>>>()?;
        candidates.push(CandidateOutcome {
            token: t,
            in_mass: original_in_mass || i + 1 < tokens.len(),
            responses,
        });
    }
    let mut freq: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for c in &candidates {
        for r in &c.responses {
            *freq.entry(r.clone()).or_default() += 1;
        }
    }
    let total: u64 = freq.values().sum();
    let matches = freq.get(pair.response()).copied().unwrap_or(0);
    let counts: Vec<u64> = freq.values().copied().collect();
    let replacement_entropy = entropy_from_counts(&counts)?;
    let mut frequencies: Vec<ResponseFrequency> = freq
        .into_iter()
        .map(|(tokens, count)| ResponseFrequency { tokens, count })
        .collect();
    frequencies.sort_by(|a, b| b.count.cmp(&a.count).then(a.tokens.cmp(&b.tokens)));
    Ok(ReplacementRun {
        position,
        candidate_count: candidates.len(),
        candidates,
        frequencies,
        replacement_entropy,
        original_response_fraction: matches as f64 / total as f64,
        original_in_mass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalResponse {
    pub tokens: Vec<TokenId>,
    pub count: u64,
    pub samples: usize,
    pub distinct: usize,
}

/// Draws `samples` responses and returns the most frequent one (ties go to
/// the lexicographically smallest token sequence).
pub fn select_modal_response(
    backend: &dyn ScoringBackend,
    prompt: &[TokenId],
    strategy: &Strategy,
    samples: usize,
    max_new: usize,
    parallelism: usize,
) -> Result<ModalResponse> {
    if samples == 0 {
        return Err(Error::usage("modal response needs at least one sample"));
    }
    let base = match strategy {
        Strategy::TopP { seed, .. } => *seed,
        Strategy::Greedy => 0,
    };
    let idx: Vec<u64> = (0..samples as u64).collect();
    let outs = par_map(&idx, parallelism.max(1), |&i| {
        backend.generate(prompt, &strategy.reseeded(derive_seed(base, i, 0)), max_new)
    });
    let mut freq: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for o in outs {
        *freq.entry(o?).or_default() += 1;
    }
    let distinct = freq.len();
    let (tokens, count) = freq
        .into_iter()
        .fold((Vec::new(), 0u64), |best, (seq, c)| if c > best.1 { (seq, c) } else { best });
    Ok(ModalResponse {
        tokens,
        count,
        samples,
        distinct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::EPS_TOY;
    use crate::toy::{TabularLM, ToyOptions};

    fn probs(ps: &[f64]) -> LogDistribution {
        LogDistribution::from_probs(ps, EPS_TOY).unwrap()
    }

    #[test]
    fn candidate_examples() {
        assert_eq!(top_mass_candidates(&probs(&[0.0, 1.0, 0.0]), 0.9), vec![1]);
        assert_eq!(top_mass_candidates(&probs(&[0.1; 10]), 0.9).len(), 9);
        assert_eq!(top_mass_candidates(&probs(&[0.5, 0.3, 0.15, 0.05]), 0.9), vec![0, 1, 2]);
        assert_eq!(top_mass_candidates(&probs(&[0.15, 0.3, 0.5, 0.05]), 0.9), vec![2, 1, 0]);
    }

    #[test]
    fn seeds_differ_by_component() {
        assert_ne!(derive_seed(1, 2, 0), derive_seed(1, 2, 1));
        assert_ne!(derive_seed(1, 2, 0), derive_seed(1, 3, 0));
        assert_eq!(derive_seed(9, 9, 9), derive_seed(9, 9, 9));
    }

    #[test]
    fn outside_mass_original_is_appended() {
        // token 3 carries 5% of the first-token mass, below the 90% cut
        let m = TabularLM::from_weights(4, 1, ToyOptions::default(), |c| {
            if c.is_empty() { vec![0.4, 0.3, 0.25, 0.05] } else { vec![0.1, 0.1, 0.1, 0.7] }
        })
        .unwrap();
        let pair = PromptResponsePair::from_tokens(m.vocab(), vec![3], vec![3]).unwrap();
        let run = replacement_experiment(&m, &pair, 0, &ReplacementConfig::default()).unwrap();
        assert!(!run.original_in_mass);
        assert_eq!(run.candidate_count, 4);
        assert!(!run.candidates[3].in_mass);
        assert_eq!(run.replacement_entropy, 0.0);
        assert_eq!(run.original_response_fraction, 1.0);
    }

    #[test]
    fn modal_response_under_greedy_is_the_greedy_chain() {
        let m = TabularLM::random_tabular(4, 1, 2).unwrap();
        let g = m.generate(&[0, 1], &Strategy::Greedy, 3).unwrap();
        let modal = select_modal_response(&m, &[0, 1], &Strategy::Greedy, 5, 3, 2).unwrap();
        assert_eq!(modal.tokens, g);
        assert_eq!((modal.count, modal.distinct), (5, 1));
    }
}
