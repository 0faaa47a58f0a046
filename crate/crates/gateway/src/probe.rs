//! Determinism probe: repeated scoring must be bit-identical.

use serde::{Deserialize, Serialize};
use tokattr_core::{ScoringBackend, TokenId};

pub const DEFAULT_PROBE_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterminismReport {
    pub passed: bool,
    pub repeats: usize,
    /// Distinct bit patterns seen across the repeats (1 when passing).
    pub distinct_responses: usize,
    /// What the backend claims about itself.
    pub declared_deterministic: bool,
}

/// Fixed probe sequence spread over the vocabulary.
pub fn probe_sequence(vocab_size: usize) -> Vec<TokenId> {
    (0..8u64).map(|i| ((i * 7 + 3) % vocab_size as u64) as TokenId).collect()
}

/// Scores the probe sequence `repeats` times (a next-token distribution and a
/// teacher-forced continuation) and compares raw bits.
///
/// Probe the raw backend: a memoizing wrapper would hide nondeterminism.
pub fn probe_determinism(backend: &dyn ScoringBackend, repeats: usize) -> tokattr_core::Result<DeterminismReport> {
    if repeats < 2 {
        return Err(tokattr_core::Error::usage("the determinism probe needs at least 2 repeats"));
    }
    let seq = probe_sequence(backend.vocab().size);
    let (context, continuation) = seq.split_at(4);
    let mut seen: Vec<Vec<u64>> = Vec::new();
    for _ in 0..repeats {
        let dist = backend.next_dist(context, 1.0)?;
        let mut bits: Vec<u64> = dist.to_dense_log_probs().iter().map(|x| x.to_bits()).collect();
        bits.extend(backend.token_logprobs(context, continuation)?.iter().map(|x| x.to_bits()));
        bits.push(backend.seq_logprob(context, continuation)?.to_bits());
        if !seen.contains(&bits) {
            seen.push(bits);
        }
    }
    Ok(DeterminismReport {
        passed: seen.len() == 1,
        repeats,
        distinct_responses: seen.len(),
        declared_deterministic: backend.is_deterministic(),
    })
}
