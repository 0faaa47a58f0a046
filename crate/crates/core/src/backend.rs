//! The scoring-oracle contract and a memoizing wrapper.
//!
//! Every model the engine analyzes is reached through [`ScoringBackend`].
//! Implementations must be pure: the same request returns bit-identical
//! values for the lifetime of the process.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{top_mass_prefix, LogDistribution};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, VocabInfo};

/// Decoding strategy for [`ScoringBackend::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    /// Argmax at every step; ties go to the smallest token ID.
    Greedy,
    /// Nucleus sampling with a fixed seed.
    TopP { p: f64, seed: u64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::TopP { .. } => "top_p",
        }
    }

    /// Same strategy with a different sampling seed (greedy is unchanged).
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            Strategy::Greedy => Strategy::Greedy,
            Strategy::TopP { p, .. } => Strategy::TopP { p, seed },
        }
    }
}

/// One teacher-forced scoring request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreJob {
    pub context: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

impl ScoreJob {
    pub fn new(context: Vec<TokenId>, continuation: Vec<TokenId>) -> Self {
        Self {
            context,
            continuation,
        }
    }
}

/// Detokenized text plus one display piece per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detokenized {
    pub text: String,
    pub pieces: Vec<String>,
}

pub trait ScoringBackend: Send + Sync {
    fn vocab(&self) -> Arc<VocabInfo>;

    /// Self-declared determinism. The probe in the gateway crate verifies it.
    fn is_deterministic(&self) -> bool;

    /// Short human-readable identity for manifests.
    fn describe(&self) -> String {
        self.vocab().model_id.clone()
    }

    /// Distribution of the token following `context`. An empty context gives
    /// the first-token distribution. With `top_mass < 1` the result is sparse.
    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> Result<LogDistribution>;

    /// Per-token log-probabilities of `continuation` under teacher forcing.
    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>>;

    /// Scores many jobs. Results line up with `jobs`; order must not matter.
    fn score_batch(&self, jobs: &[ScoreJob]) -> Vec<Result<Vec<f64>>> {
        jobs.iter()
            .map(|j| self.token_logprobs(&j.context, &j.continuation))
            .collect()
    }

    /// `Σ_ν log Pr(c_ν | context ⊕ c_<ν)`.
    fn seq_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        if continuation.is_empty() {
            return Err(Error::usage("seq_logprob needs a non-empty continuation"));
        }
        Ok(sum_logprobs(&self.token_logprobs(context, continuation)?))
    }

    fn generate(
        &self,
        context: &[TokenId],
        strategy: &Strategy,
        max_new: usize,
    ) -> Result<Vec<TokenId>>;

    fn stop_token(&self) -> Option<TokenId> {
        None
    }

    /// Token used as the "removed" placeholder by faithfulness metrics.
    fn pad_token(&self) -> Option<TokenId> {
        None
    }

    fn tokenize(&self, _text: &str) -> Result<Vec<TokenId>> {
        Err(Error::usage("this backend has no tokenizer"))
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<Detokenized> {
        let pieces: Vec<String> = tokens.iter().map(|t| format!("<{t}>")).collect();
        Ok(Detokenized {
            text: pieces.concat(),
            pieces,
        })
    }
}

/// Left-to-right sum; every caller uses this so totals agree bit-for-bit.
pub fn sum_logprobs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Picks the next token from a dense log distribution.
///
/// Greedy takes the argmax (smallest ID on ties). Top-p restricts to the
/// nucleus (boundary ties included), renormalizes, and draws with `rng`.
pub fn pick_token(log_probs: &[f64], strategy: &Strategy, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    match strategy {
        Strategy::Greedy => {
            let mut best = 0usize;
            for (i, &lp) in log_probs.iter().enumerate() {
                if lp > log_probs[best] {
                    best = i;
                }
            }
            Ok(best as TokenId)
        }
        Strategy::TopP { p, .. } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::usage(format!("top-p value {p} outside (0, 1]")));
            }
            let nucleus = top_mass_prefix(log_probs, *p, true);
            let weights: Vec<f64> = nucleus.iter().map(|&i| log_probs[i].exp()).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::degenerate("nucleus carries no probability mass"));
            }
            let mut u = rng.gen::<f64>() * total;
            for (&i, w) in nucleus.iter().zip(&weights) {
                if u < *w {
                    return Ok(i as TokenId);
                }
                u -= w;
            }
            // rounding fell off the end; take the last positive-mass token
            let last = nucleus
                .iter()
                .zip(&weights)
                .rev()
                .find(|(_, w)| **w > 0.0)
                .map(|(&i, _)| i)
                .expect("positive total implies a positive weight");
            Ok(last as TokenId)
        }
    }
}

/// Autoregressive decoding driven by `next_dist`; stops at `max_new` tokens or
/// after emitting the backend's stop token.
pub fn generate_with<B: ScoringBackend + ?Sized>(
    backend: &B,
    context: &[TokenId],
    strategy: &Strategy,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    if max_new == 0 {
        return Err(Error::usage("max_new must be at least 1"));
    }
    let seed = match strategy {
        Strategy::TopP { seed, .. } => *seed,
        Strategy::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(max_new);
    let stop = backend.stop_token();
    for _ in 0..max_new {
        let dist = backend.next_dist(&ctx, 1.0)?;
        let tok = pick_token(&dist.to_dense_log_probs(), strategy, &mut rng)?;
        out.push(tok);
        ctx.push(tok);
        if Some(tok) == stop {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CacheKey {
    NextDist {
        context: Vec<TokenId>,
        top_mass_bits: u64,
    },
    TokenLogprobs(ScoreJob),
}

#[derive(Debug, Clone)]
enum CacheValue {
    Dist(LogDistribution),
    Logprobs(Vec<f64>),
}

impl CacheValue {
    fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        match self {
            CacheValue::Dist(d) => {
                d.size().hash(&mut h);
                for (t, lp) in d.entries() {
                    t.hash(&mut h);
                    lp.to_bits().hash(&mut h);
                }
                d.residual_log_mass().to_bits().hash(&mut h);
            }
            CacheValue::Logprobs(v) => {
                for lp in v {
                    lp.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

struct CacheInner {
    map: HashMap<(String, CacheKey), (CacheValue, u64)>,
    order: VecDeque<(String, CacheKey)>,
}

/// Hit/miss counters for a [`CachedBackend`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub corrupt: u64,
    pub len: usize,
}

/// Memoizes `next_dist` and `token_logprobs` of a delegate backend.
///
/// Keys carry the tokenizer fingerprint. Eviction is first-in first-out once
/// `capacity` entries are stored. Every read re-verifies a checksum and treats
/// a mismatch as a miss.
pub struct CachedBackend<B> {
    inner: B,
    capacity: usize,
    fingerprint: String,
    state: Mutex<CacheInner>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    corrupt: AtomicU64,
}

/// Wraps `backend` in a cache holding at most `capacity` entries.
pub fn cached<B: ScoringBackend>(backend: B, capacity: usize) -> Result<CachedBackend<B>> {
    CachedBackend::new(backend, capacity)
}

impl<B: ScoringBackend> CachedBackend<B> {
    pub fn new(inner: B, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::usage("cache capacity must be at least 1"));
        }
        let fingerprint = inner.vocab().tokenizer_fingerprint.clone();
        Ok(Self {
            inner,
            capacity,
            fingerprint,
            state: Mutex::new(CacheInner {
                map: HashMap::new(),
                order: VecDeque::new(),
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            corrupt: self.corrupt.load(Ordering::Relaxed),
            len: self.state.lock().expect("cache poisoned").map.len(),
        }
    }

    fn lookup(&self, key: &CacheKey) -> Option<CacheValue> {
        let full = (self.fingerprint.clone(), key.clone());
        let mut st = self.state.lock().expect("cache poisoned");
        let (value, sum) = st.map.get(&full)?.clone();
        if value.checksum() != sum {
            st.map.remove(&full);
            st.order.retain(|k| k != &full);
            self.corrupt.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        self.hits.fetch_add(1, Ordering::Relaxed);
        Some(value)
    }

    fn store(&self, key: CacheKey, value: CacheValue) {
        let full = (self.fingerprint.clone(), key);
        let sum = value.checksum();
        let mut st = self.state.lock().expect("cache poisoned");
        if st.map.insert(full.clone(), (value, sum)).is_none() {
            st.order.push_back(full);
        }
        while st.map.len() > self.capacity {
            match st.order.pop_front() {
                Some(old) => {
                    st.map.remove(&old);
                    self.evictions.fetch_add(1, Ordering::Relaxed);
                }
                None => break,
            }
        }
    }

    #[cfg(test)]
    fn corrupt_all(&self) {
        let mut st = self.state.lock().unwrap();
        for (_, (v, _)) in st.map.iter_mut() {
            if let CacheValue::Logprobs(lps) = v {
                for lp in lps.iter_mut() {
                    *lp += 1.0;
                }
            }
        }
    }
}

impl<B: ScoringBackend> ScoringBackend for CachedBackend<B> {
    fn vocab(&self) -> Arc<VocabInfo> {
        self.inner.vocab()
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn describe(&self) -> String {
        format!("cached({})", self.inner.describe())
    }

    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> Result<LogDistribution> {
        let key = CacheKey::NextDist {
            context: context.to_vec(),
            top_mass_bits: top_mass.to_bits(),
        };
        if let Some(CacheValue::Dist(d)) = self.lookup(&key) {
            return Ok(d);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let d = self.inner.next_dist(context, top_mass)?;
        self.store(key, CacheValue::Dist(d.clone()));
        Ok(d)
    }

    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>> {
        let key = CacheKey::TokenLogprobs(ScoreJob::new(context.to_vec(), continuation.to_vec()));
        if let Some(CacheValue::Logprobs(v)) = self.lookup(&key) {
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.inner.token_logprobs(context, continuation)?;
        self.store(key, CacheValue::Logprobs(v.clone()));
        Ok(v)
    }

    fn score_batch(&self, jobs: &[ScoreJob]) -> Vec<Result<Vec<f64>>> {
        let mut out: Vec<Option<Result<Vec<f64>>>> = vec![None; jobs.len()];
        let mut missing = Vec::new();
        let mut missing_idx = Vec::new();
        for (i, job) in jobs.iter().enumerate() {
            if let Some(CacheValue::Logprobs(v)) =
                self.lookup(&CacheKey::TokenLogprobs(job.clone()))
            {
                out[i] = Some(Ok(v));
            } else {
                self.misses.fetch_add(1, Ordering::Relaxed);
                missing.push(job.clone());
                missing_idx.push(i);
            }
        }
        if !missing.is_empty() {
            let fresh = self.inner.score_batch(&missing);
            for ((i, job), res) in missing_idx.into_iter().zip(missing).zip(fresh) {
                if let Ok(v) = &res {
                    self.store(CacheKey::TokenLogprobs(job), CacheValue::Logprobs(v.clone()));
                }
                out[i] = Some(res);
            }
        }
        out.into_iter()
            .map(|r| r.expect("every job answered"))
            .collect()
    }

    fn generate(
        &self,
        context: &[TokenId],
        strategy: &Strategy,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        self.inner.generate(context, strategy, max_new)
    }

    fn stop_token(&self) -> Option<TokenId> {
        self.inner.stop_token()
    }

    fn pad_token(&self) -> Option<TokenId> {
        self.inner.pad_token()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<Detokenized> {
        self.inner.detokenize(tokens)
    }
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for Arc<T> {
    fn vocab(&self) -> Arc<VocabInfo> {
        (**self).vocab()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> Result<LogDistribution> {
        (**self).next_dist(context, top_mass)
    }
    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>> {
        (**self).token_logprobs(context, continuation)
    }
    fn score_batch(&self, jobs: &[ScoreJob]) -> Vec<Result<Vec<f64>>> {
        (**self).score_batch(jobs)
    }
    fn seq_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        (**self).seq_logprob(context, continuation)
    }
    fn generate(&self, context: &[TokenId], strategy: &Strategy, max_new: usize) -> Result<Vec<TokenId>> {
        (**self).generate(context, strategy, max_new)
    }
    fn stop_token(&self) -> Option<TokenId> {
        (**self).stop_token()
    }
    fn pad_token(&self) -> Option<TokenId> {
        (**self).pad_token()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<Detokenized> {
        (**self).detokenize(tokens)
    }
}
