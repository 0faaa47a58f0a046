//! Attribution score: how much the response's log-probability depends on
//! the identity of one prompt token.
//!
//! For prompt position `μ` the score compares `Pr(r | p)` with the response
//! probability when `p_μ` is left unspecified:
//!
//! ```text
//! A_μ = log Pr(r | p) - log D
//! D   = Σ_x Pr(r | p_x) B(x)
//! B(x) ∝ Pr(p_{>μ} | p_{<μ} ⊕ x) Pr(x | p_{<μ})
//! ```
//!
//! where `p_x` is the prompt with `x` at `μ`. Every factor is a teacher-forced
//! next-token conditional, so any backend implementing
//! [`ScoringBackend`](crate::backend::ScoringBackend) can be analyzed.
//! Internally `A_μ = log X - log Y` with
//!
//! ```text
//! X = Pr(r | p) Σ_x w(x)
//! Y = Σ_x Pr(r | p_x) w(x)
//! w(x) = Pr(p_{>μ} | p_{<μ} ⊕ x) Pr(x | p_{<μ})
//! ```
//!
//! The normalizer of `B` is kept explicit rather than cancelled.

use serde::{Deserialize, Serialize};

use crate::backend::{sum_logprobs, ScoreJob, ScoringBackend};
use crate::context::contextual_from_parts;
use crate::dist::{log_sum_exp_unchecked, LogDistribution};
use crate::error::{Error, Result};
use crate::info::{entropy, kl_divergence};
use crate::parallel::par_map;
use crate::record::{AttributionRecord, Bucket, Candidate};
use crate::vocab::{PromptResponsePair, TokenId};

/// Minimum probability for a candidate token to be listed in reports.
pub const DISPLAY_MIN_PROB: f64 = 0.005;
const DISPLAY_MAX_CANDIDATES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Replacement sums run over the smallest top-probability token set of
    /// the prior reaching this mass. `1.0` sums over the whole vocabulary.
    pub top_mass: f64,
    /// Maximum number of concurrent backend requests.
    pub parallelism: usize,
    /// Inclusive `A_μ` band treated as near zero.
    pub near_zero_band: (f64, f64),
    /// Leave backend-declared special tokens out of the replacement sums.
    pub exclude_special: bool,
    /// Scoring jobs per backend batch call.
    pub batch_size: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            top_mass: 1.0,
            parallelism: 1,
            near_zero_band: (-0.1, 0.1),
            exclude_special: false,
            batch_size: 64,
        }
    }
}

impl AttributionConfig {
    pub fn with_top_mass(mut self, tau: f64) -> Self {
        self.top_mass = tau;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_mass > 0.0 && self.top_mass <= 1.0) {
            return Err(Error::usage(format!("top mass {} outside (0, 1]", self.top_mass)));
        }
        if self.parallelism == 0 || self.batch_size == 0 {
            return Err(Error::usage("parallelism and batch size must be positive"));
        }
        let (lo, hi) = self.near_zero_band;
        if !(lo < 0.0 && 0.0 < hi) {
            return Err(Error::usage(format!("near-zero band ({lo}, {hi}) must straddle zero")));
        }
        Ok(())
    }
}

/// Factors for one replacement token `x` at the attributed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementFactors {
    pub token: TokenId,
    /// `log Pr(x | p_{<μ})`.
    pub prior_logprob: f64,
    /// `log Pr(p_{>μ} | p_{<μ} ⊕ x)`; zero for the last prompt position.
    pub suffix_logprob: f64,
    /// `log Pr(r | p_x)`.
    pub response_logprob: f64,
    /// `log B(x)`.
    pub log_bayes: f64,
}

impl ReplacementFactors {
    /// `log w(x)`, the unnormalized Bayes weight.
    pub fn log_weight(&self) -> f64 {
        self.prior_logprob + self.suffix_logprob
    }
}

/// Everything needed to assemble `X`, `Y` and `D` for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenominatorParts {
    pub position: usize,
    /// Vocabulary size of the backend.
    pub vocab_size: usize,
    /// `log Pr(r | p)`.
    pub response_logprob: f64,
    /// Included replacement tokens, ascending by token ID.
    pub replacements: Vec<ReplacementFactors>,
    /// `log Σ_x w(x)`, the normalizer of `B`.
    pub log_normalizer: f64,
    /// `log D = log Σ_x Pr(r | p_x) B(x)`.
    pub log_d: f64,
    /// Prior mass left out by top-mass truncation (`-inf` when exact).
    pub prior_residual_log_mass: f64,
    pub excluded_special: Vec<TokenId>,
}

impl DenominatorParts {
    pub fn log_x(&self) -> f64 {
        self.response_logprob + self.log_normalizer
    }

    pub fn log_y(&self) -> f64 {
        self.log_d + self.log_normalizer
    }

    pub fn is_truncated(&self) -> bool {
        self.prior_residual_log_mass > f64::NEG_INFINITY
    }
}

/// Result of [`attribution_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub a_mu: f64,
    pub parts: DenominatorParts,
    /// Upper bound on `|A(τ) - A(1)|` caused by excluded replacements.
    pub truncation_bound: f64,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bound on `|A(τ) - A(1)|` from the excluded prior mass `m`.
///
/// Excluded tokens add `W_E <= m` to `Σ w` and `Y_E <= W_E` to `Y`, because
/// the suffix and response factors are probabilities. Both log corrections are
/// non-negative and at most `ln(1 + m / Y_I)`, so the difference of the two is
/// bounded by that amount as well. Sets are nested in `τ`, so the bound never
/// grows as `τ` increases.
fn truncation_bound(parts: &DenominatorParts) -> f64 {
    if !parts.is_truncated() {
        return 0.0;
    }
    softplus(parts.prior_residual_log_mass - parts.log_y())
}

/// `log Pr(r | p)` by teacher forcing the response after the prompt.
pub fn response_logprob(backend: &dyn ScoringBackend, pair: &PromptResponsePair) -> Result<f64> {
    backend.seq_logprob(pair.prompt(), pair.response())
}

/// Per-position request plan: the prior and the scoring jobs it implies.
struct PositionPlan {
    position: usize,
    prior: LogDistribution,
    tokens: Vec<TokenId>,
    excluded_special: Vec<TokenId>,
    jobs: Vec<ScoreJob>,
}

fn plan_position(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    position: usize,
    config: &AttributionConfig,
) -> Result<PositionPlan> {
    let prompt = pair.prompt();
    let prefix = &prompt[..position];
    let prior = backend.next_dist(prefix, config.top_mass)?;
    let vocab = backend.vocab();
    if prior.size() != vocab.size {
        return Err(Error::transport(format!(
            "backend returned a distribution of size {} for vocabulary {}",
            prior.size(),
            vocab.size
        )));
    }
    let mut tokens: Vec<TokenId> = prior.entries().iter().map(|e| e.0).collect();
    tokens.sort_unstable();
    let mut excluded_special = Vec::new();
    if config.exclude_special {
        tokens.retain(|t| {
            let special = vocab.is_special(*t);
            if special {
                excluded_special.push(*t);
            }
            !special
        });
    }
    if tokens.len() < 2 {
        return Err(Error::usage(format!(
            "only {} replacement token(s) survive top mass {}",
            tokens.len(),
            config.top_mass
        )));
    }
    let continuation: Vec<TokenId> = prompt[position + 1..]
        .iter()
        .chain(pair.response())
        .copied()
        .collect();
    let jobs = tokens
        .iter()
        .map(|&t| {
            let mut ctx = prefix.to_vec();
            ctx.push(t);
            ScoreJob::new(ctx, continuation.clone())
        })
        .collect();
    Ok(PositionPlan {
        position,
        prior,
        tokens,
        excluded_special,
        jobs,
    })
}

fn assemble(
    plan: &PositionPlan,
    results: Vec<Vec<f64>>,
    suffix_len: usize,
    response_lp: f64,
    vocab_size: usize,
) -> Result<DenominatorParts> {
    let mut reps = Vec::with_capacity(plan.tokens.len());
    for (&token, lps) in plan.tokens.iter().zip(results) {
        if lps.len() != plan.jobs[0].continuation.len() {
            return Err(Error::transport(format!(
                "expected {} per-token values, backend returned {}",
                plan.jobs[0].continuation.len(),
                lps.len()
            )));
        }
        let prior_logprob = plan
            .prior
            .log_prob(token)
            .ok_or_else(|| Error::internal(format!("token {token} missing from prior")))?;
        reps.push(ReplacementFactors {
            token,
            prior_logprob,
            suffix_logprob: sum_logprobs(&lps[..suffix_len]),
            response_logprob: sum_logprobs(&lps[suffix_len..]),
            log_bayes: 0.0,
        });
    }
    let log_w: Vec<f64> = reps.iter().map(ReplacementFactors::log_weight).collect();
    let log_normalizer = log_sum_exp_unchecked(&log_w);
    if log_normalizer == f64::NEG_INFINITY {
        return Err(Error::degenerate(
            "the rest of the prompt has zero probability under every replacement",
        ));
    }
    for r in &mut reps {
        r.log_bayes = r.log_weight() - log_normalizer;
    }
    let summands: Vec<f64> = reps.iter().map(|r| r.response_logprob + r.log_bayes).collect();
    let log_d = log_sum_exp_unchecked(&summands);
    if log_d == f64::NEG_INFINITY {
        return Err(Error::degenerate("the response has zero probability under every replacement"));
    }
    Ok(DenominatorParts {
        position: plan.position,
        vocab_size,
        response_logprob: response_lp,
        replacements: reps,
        log_normalizer,
        log_d,
        prior_residual_log_mass: plan.prior.residual_log_mass(),
        excluded_special: plan.excluded_special.clone(),
    })
}

impl Error {
    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}

/// Runs every scoring job of every plan, batched and bounded by `parallelism`.
fn run_jobs(
    backend: &dyn ScoringBackend,
    plans: &[PositionPlan],
    config: &AttributionConfig,
) -> Vec<Vec<Result<Vec<f64>>>> {
    let flat: Vec<ScoreJob> = plans.iter().flat_map(|p| p.jobs.iter().cloned()).collect();
    let chunks: Vec<&[ScoreJob]> = flat.chunks(config.batch_size).collect();
    let answered: Vec<Result<Vec<f64>>> = par_map(&chunks, config.parallelism, |chunk| {
        let out = backend.score_batch(chunk);
        if out.len() == chunk.len() {
            out
        } else {
            vec![Err(Error::transport("backend dropped jobs from a batch")); chunk.len()]
        }
    })
    .into_iter()
    .flatten()
    .collect();
    let mut it = answered.into_iter();
    plans
        .iter()
        .map(|p| it.by_ref().take(p.jobs.len()).collect())
        .collect()
}

fn parts_for_positions(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    positions: &[usize],
    config: &AttributionConfig,
) -> Result<Vec<DenominatorParts>> {
    config.validate()?;
    if backend.vocab().size != pair.vocab().size {
        return Err(Error::usage("pair vocabulary does not match the backend"));
    }
    for &m in positions {
        if !pair.is_masked(m) {
            return Err(Error::usage(format!("position {m} is not in the attribution mask")));
        }
    }
    let response_lp = response_logprob(backend, pair)?;
    let planned: Vec<Result<PositionPlan>> = par_map(positions, config.parallelism, |&m| {
        plan_position(backend, pair, m, config).map_err(|e| e.at_position(m))
    });
    let mut errors = Vec::new();
    let mut plans = Vec::new();
    for p in planned {
        match p {
            Ok(p) => plans.push(p),
            Err(e) => errors.push(e),
        }
    }
    let results = run_jobs(backend, &plans, config);
    let vocab_size = backend.vocab().size;
    let mut parts = Vec::with_capacity(plans.len());
    for (plan, res) in plans.iter().zip(results) {
        let res: Result<Vec<Vec<f64>>> = res.into_iter().collect();
        let suffix_len = pair.prompt().len() - plan.position - 1;
        match res.and_then(|r| assemble(plan, r, suffix_len, response_lp, vocab_size)) {
            Ok(p) => parts.push(p),
            Err(e) => errors.push(e.at_position(plan.position)),
        }
    }
    match errors.len() {
        0 => Ok(parts),
        1 => Err(errors.pop().expect("one error")),
        _ => {
            errors.sort_by_key(|e| match e {
                Error::AtPosition { position, .. } => *position,
                _ => usize::MAX,
            });
            Err(Error::Multiple(errors))
        }
    }
}

/// Assembles the Bayes-inverted denominator for one position.
pub fn denominator_parts(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    position: usize,
    config: &AttributionConfig,
) -> Result<DenominatorParts> {
    let mut v = parts_for_positions(backend, pair, &[position], config)?;
    Ok(v.pop().expect("one position requested"))
}

/// `A_μ` plus its factors and truncation bound.
pub fn attribution_score(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    position: usize,
    config: &AttributionConfig,
) -> Result<AttributionScore> {
    let parts = denominator_parts(backend, pair, position, config)?;
    Ok(score_from_parts(parts))
}

pub fn score_from_parts(parts: DenominatorParts) -> AttributionScore {
    let a_mu = parts.log_x() - parts.log_y();
    let truncation_bound = truncation_bound(&parts);
    AttributionScore {
        a_mu,
        parts,
        truncation_bound,
    }
}

/// Parts for every masked position, sharing `log Pr(r | p)`.
pub fn all_parts(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    config: &AttributionConfig,
) -> Result<Vec<DenominatorParts>> {
    parts_for_positions(backend, pair, pair.mask(), config)
}

fn candidates(dist: &LogDistribution) -> Vec<Candidate> {
    dist.top_entries(DISPLAY_MIN_PROB)
        .into_iter()
        .take(DISPLAY_MAX_CANDIDATES)
        .map(|(token_id, prob)| Candidate { token_id, prob })
        .collect()
}

/// Builds the full record (score, entropies, divergence) from shared parts.
pub fn record_from_parts(
    pair: &PromptResponsePair,
    parts: DenominatorParts,
    token_text: String,
    config: &AttributionConfig,
) -> Result<AttributionRecord> {
    let ctx = contextual_from_parts(&parts)?;
    let s_p = entropy(&ctx.q_p)?;
    let s_pr = entropy(&ctx.q_pr)?;
    let kl_mu = kl_divergence(&ctx.q_p, &ctx.q_pr)?;
    let position = parts.position;
    let replacement_count = parts.replacements.len();
    let excluded_special = parts.excluded_special.clone();
    let kl_support_renormalized = ctx.q_p.size() != ctx.q_p.entries().len();
    let score = score_from_parts(parts);
    Ok(AttributionRecord {
        position,
        token_id: pair.prompt()[position],
        token_text,
        a_mu: score.a_mu,
        s_p,
        s_pr,
        kl_mu,
        bucket: Bucket::classify(score.a_mu, config.near_zero_band),
        truncation_bound: score.truncation_bound,
        replacement_count,
        excluded_special,
        kl_support_renormalized,
        candidates_p: candidates(&ctx.q_p),
        candidates_pr: candidates(&ctx.q_pr),
    })
}

/// Display pieces for the prompt, falling back to token IDs.
pub fn prompt_pieces(backend: &dyn ScoringBackend, pair: &PromptResponsePair) -> Vec<String> {
    match backend.detokenize(pair.prompt()) {
        Ok(d) if d.pieces.len() == pair.prompt().len() => d.pieces,
        _ => pair.prompt().iter().map(|t| t.to_string()).collect(),
    }
}

/// One record per masked position, in ascending position order.
pub fn attribute_all(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    config: &AttributionConfig,
) -> Result<Vec<AttributionRecord>> {
    let parts = all_parts(backend, pair, config)?;
    let pieces = prompt_pieces(backend, pair);
    parts
        .into_iter()
        .map(|p| {
            let pos = p.position;
            record_from_parts(pair, p, pieces[pos].clone(), config).map_err(|e| e.at_position(pos))
        })
        .collect()
}
