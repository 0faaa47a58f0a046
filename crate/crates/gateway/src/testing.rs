//! Test doubles.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tokattr_core::{Detokenized, LogDistribution, ScoreJob, ScoringBackend, Strategy, TokenId, VocabInfo};

/// Wraps a backend and adds fresh uniform noise of the given amplitude to
/// every log-probability it returns, so repeated calls disagree.
pub struct Jittered<B> {
    inner: B,
    amplitude: f64,
    counter: AtomicU64,
}

/// Noise amplitude used by the determinism checks.
pub const DEFAULT_JITTER: f64 = 1e-7;

impl<B: ScoringBackend> Jittered<B> {
    pub fn new(inner: B, amplitude: f64) -> Self {
        Self {
            inner,
            amplitude,
            counter: AtomicU64::new(0),
        }
    }

    fn noise(&self) -> f64 {
        // SplitMix64 over a global counter
        let mut z = self
            .counter
            .fetch_add(1, Ordering::Relaxed)
            .wrapping_add(1)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let unit = (z >> 11) as f64 / (1u64 << 53) as f64;
        self.amplitude * (2.0 * unit - 1.0)
    }

    fn jitter(&self, x: f64) -> f64 {
        if x.is_finite() {
            x + self.noise()
        } else {
            x
        }
    }
}

impl<B: ScoringBackend> ScoringBackend for Jittered<B> {
    fn vocab(&self) -> Arc<VocabInfo> {
        self.inner.vocab()
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> tokattr_core::Result<LogDistribution> {
        let d = self.inner.next_dist(context, top_mass)?;
        let entries = d.entries().iter().map(|&(t, lp)| (t, self.jitter(lp))).collect();
        LogDistribution::sparse(d.size(), entries, d.residual_log_mass(), 1e-3)
    }

    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> tokattr_core::Result<Vec<f64>> {
        Ok(self
            .inner
            .token_logprobs(context, continuation)?
            .into_iter()
            .map(|x| self.jitter(x))
            .collect())
    }

    fn score_batch(&self, jobs: &[ScoreJob]) -> Vec<tokattr_core::Result<Vec<f64>>> {
        jobs.iter()
            .map(|j| self.token_logprobs(&j.context, &j.continuation))
            .collect()
    }

    fn generate(&self, context: &[TokenId], strategy: &Strategy, max_new: usize) -> tokattr_core::Result<Vec<TokenId>> {
        self.inner.generate(context, strategy, max_new)
    }

    fn stop_token(&self) -> Option<TokenId> {
        self.inner.stop_token()
    }

    fn pad_token(&self) -> Option<TokenId> {
        self.inner.pad_token()
    }

    fn tokenize(&self, text: &str) -> tokattr_core::Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> tokattr_core::Result<Detokenized> {
        self.inner.detokenize(tokens)
    }
}
