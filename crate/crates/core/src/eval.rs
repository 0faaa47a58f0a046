//! Faithfulness metrics for attribution vectors.
//!
//! The model score is `f(x) = log Pr(r | x)` for the fixed response `r`.
//! "Removing" a prompt token means replacing it with a baseline token, which
//! keeps the prompt length unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::ScoringBackend;
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::vocab::{PromptResponsePair, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub baseline_token: TokenId,
    /// Bernoulli rate of the infidelity perturbations.
    pub perturb_rate: f64,
    /// Number of infidelity perturbations.
    pub perturbation_count: usize,
    /// Top-k fractions of the attributed positions.
    pub k_bins: Vec<f64>,
    pub seed: u64,
    pub parallelism: usize,
}

impl EvalTarget {
    pub const DEFAULT_K_BINS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

    /// Defaults with the backend's padding token (else token 0) as baseline.
    pub fn for_backend(backend: &dyn ScoringBackend) -> Self {
        Self {
            baseline_token: backend.pad_token().unwrap_or(0),
            perturb_rate: 0.2,
            perturbation_count: 128,
            k_bins: Self::DEFAULT_K_BINS.to_vec(),
            seed: 0,
            parallelism: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.perturb_rate > 0.0 && self.perturb_rate < 1.0) {
            return Err(Error::usage(format!("perturbation rate {} outside (0, 1)", self.perturb_rate)));
        }
        if self.perturbation_count == 0 {
            return Err(Error::usage("perturbation count must be at least 1"));
        }
        if self.k_bins.is_empty() || self.k_bins.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(Error::usage("k bins must be non-empty fractions in (0, 1]"));
        }
        if self.parallelism == 0 {
            return Err(Error::usage("parallelism must be positive"));
        }
        Ok(())
    }
}

/// Number of positions covered by top-k fraction `frac` of `n`.
pub fn k_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices into the attribution vector, highest attribution first; ties go
/// to the earlier position.
pub fn ranking(attributions: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attributions.len()).collect();
    idx.sort_by(|&a, &b| {
        attributions[b]
            .partial_cmp(&attributions[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// `K` Bernoulli(`rate`) masks over `n` attributed positions.
pub fn sample_masks(n: usize, rate: f64, count: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen::<f64>() < rate).collect())
        .collect()
}

/// Evaluates `f` on the original prompt and on prompts with the given
/// sets of attributed positions replaced by the baseline.
struct Scorer<'a> {
    backend: &'a dyn ScoringBackend,
    pair: &'a PromptResponsePair,
    target: &'a EvalTarget,
}

impl Scorer<'_> {
    fn new<'a>(
        backend: &'a dyn ScoringBackend,
        pair: &'a PromptResponsePair,
        attributions: Option<&[f64]>,
        target: &'a EvalTarget,
    ) -> Result<Scorer<'a>> {
        target.validate()?;
        backend.vocab().check_tokens(&[target.baseline_token])?;
        if let Some(a) = attributions {
            if a.len() != pair.mask().len() {
                return Err(Error::usage(format!(
                    "{} attributions for {} attributed positions",
                    a.len(),
                    pair.mask().len()
                )));
            }
        }
        Ok(Scorer { backend, pair, target })
    }

    /// Prompt with the attributed positions flagged in `removed` replaced.
    fn perturbed(&self, removed: &[bool]) -> Vec<TokenId> {
        let mut p = self.pair.prompt().to_vec();
        for (&pos, &r) in self.pair.mask().iter().zip(removed) {
            if r {
                p[pos] = self.target.baseline_token;
            }
        }
        p
    }

    fn f(&self, prompt: &[TokenId]) -> Result<f64> {
        self.backend.seq_logprob(prompt, self.pair.response())
    }

    fn f_original(&self) -> Result<f64> {
        self.f(self.pair.prompt())
    }

    /// `f(x) - f(x')` for every removal set.
    fn drops(&self, fx: f64, removals: &[Vec<bool>]) -> Result<Vec<f64>> {
        par_map(removals, self.target.parallelism, |r| {
            if r.iter().any(|&x| x) {
                self.f(&self.perturbed(r)).map(|v| fx - v)
            } else {
                Ok(0.0)
            }
        })
        .into_iter()
        .collect()
    }

    fn n(&self) -> usize {
        self.pair.mask().len()
    }

    fn top_k_set(&self, attributions: &[f64], k: usize) -> Vec<bool> {
        let mut s = vec![false; self.n()];
        for &i in ranking(attributions).iter().take(k) {
            s[i] = true;
        }
        s
    }
}

/// Mean squared gap between predicted (`Σ a_i` over removed positions) and
/// actual score drops over seeded random removals. Zero is a perfect fit.
pub fn infidelity(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
) -> Result<f64> {
    let s = Scorer::new(backend, pair, Some(attributions), target)?;
    let masks = sample_masks(s.n(), target.perturb_rate, target.perturbation_count, target.seed);
    let fx = s.f_original()?;
    let drops = s.drops(fx, &masks)?;
    let sq: f64 = masks
        .iter()
        .zip(&drops)
        .map(|(m, d)| {
            let predicted: f64 = m.iter().zip(attributions).filter(|(r, _)| **r).map(|(_, a)| a).sum();
            (predicted - d).powi(2)
        })
        .sum();
    Ok(sq / masks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionStep {
    pub fraction: f64,
    pub k: usize,
    #[serde(with = "crate::record::float_repr")]
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub steps: Vec<DeletionStep>,
    #[serde(with = "crate::record::float_repr")]
    pub aopc: f64,
    /// Drop when every attributed position is replaced.
    #[serde(with = "crate::record::float_repr")]
    pub full_drop: f64,
    /// `aopc / full_drop` clamped to `[-1, 1]`; absent when `|full_drop| <= 1e-9`.
    #[serde(with = "crate::record::float_repr::option")]
    pub naopc_full_mask: Option<f64>,
}

pub fn deletion_curve(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
) -> Result<DeletionCurve> {
    let s = Scorer::new(backend, pair, Some(attributions), target)?;
    let ks: Vec<usize> = target.k_bins.iter().map(|&f| k_count(f, s.n())).collect();
    let mut removals: Vec<Vec<bool>> = ks.iter().map(|&k| s.top_k_set(attributions, k)).collect();
    removals.push(vec![true; s.n()]);
    let fx = s.f_original()?;
    let mut drops = s.drops(fx, &removals)?;
    let full_drop = drops.pop().expect("full removal appended");
    let steps: Vec<DeletionStep> = target
        .k_bins
        .iter()
        .zip(&ks)
        .zip(&drops)
        .map(|((&fraction, &k), &drop)| DeletionStep { fraction, k, drop })
        .collect();
    let aopc = drops.iter().sum::<f64>() / drops.len() as f64;
    let naopc_full_mask = (full_drop.abs() > 1e-9).then(|| (aopc / full_drop).clamp(-1.0, 1.0));
    Ok(DeletionCurve {
        steps,
        aopc,
        full_drop,
        naopc_full_mask,
    })
}

/// `f(x) - f(x with the top-k attributed positions replaced)`.
pub fn comprehensiveness_at(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
    k: usize,
) -> Result<f64> {
    let s = Scorer::new(backend, pair, Some(attributions), target)?;
    let fx = s.f_original()?;
    Ok(s.drops(fx, &[s.top_k_set(attributions, k.min(s.n()))])?[0])
}

/// `f(x) - f(x with everything except the top-k attributed positions replaced)`.
pub fn sufficiency_at(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
    k: usize,
) -> Result<f64> {
    let s = Scorer::new(backend, pair, Some(attributions), target)?;
    let fx = s.f_original()?;
    let keep = s.top_k_set(attributions, k.min(s.n()));
    let removed: Vec<bool> = keep.iter().map(|x| !x).collect();
    Ok(s.drops(fx, &[removed])?[0])
}

fn mean_over_bins(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
    complement: bool,
) -> Result<f64> {
    let s = Scorer::new(backend, pair, Some(attributions), target)?;
    let removals: Vec<Vec<bool>> = target
        .k_bins
        .iter()
        .map(|&f| {
            let set = s.top_k_set(attributions, k_count(f, s.n()));
            if complement {
                set.iter().map(|x| !x).collect()
            } else {
                set
            }
        })
        .collect();
    let fx = s.f_original()?;
    let drops = s.drops(fx, &removals)?;
    Ok(drops.iter().sum::<f64>() / drops.len() as f64)
}

/// Mean over `k_bins` of the drop from removing the top-k tokens.
/// Higher is better.
pub fn comprehensiveness(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
) -> Result<f64> {
    mean_over_bins(backend, pair, attributions, target, false)
}

/// Mean over `k_bins` of the drop from keeping only the top-k tokens.
/// Lower is better.
pub fn sufficiency(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    attributions: &[f64],
    target: &EvalTarget,
) -> Result<f64> {
    mean_over_bins(backend, pair, attributions, target, true)
}

/// Occlusion: `a_i = f(x) - f(x with position i replaced)`, one entry per
/// attributed position.
pub fn occlusion_baseline(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    target: &EvalTarget,
) -> Result<Vec<f64>> {
    let s = Scorer::new(backend, pair, None, target)?;
    let n = s.n();
    let singles: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i == j && pair.prompt()[pair.mask()[j]] != target.baseline_token).collect())
        .collect();
    let fx = s.f_original()?;
    s.drops(fx, &singles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDirection {
    pub infidelity_higher_is_better: bool,
    pub naopc_higher_is_better: bool,
    pub comprehensiveness_higher_is_better: bool,
    pub sufficiency_higher_is_better: bool,
}

pub const METRIC_DIRECTION: MetricDirection = MetricDirection {
    infidelity_higher_is_better: false,
    naopc_higher_is_better: true,
    comprehensiveness_higher_is_better: true,
    sufficiency_higher_is_better: false,
};

/// All four metrics for one attribution method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub attributions: Vec<f64>,
    #[serde(with = "crate::record::float_repr")]
    pub infidelity: f64,
    pub deletion: DeletionCurve,
    #[serde(with = "crate::record::float_repr")]
    pub comprehensiveness: f64,
    #[serde(with = "crate::record::float_repr")]
    pub sufficiency: f64,
}

pub fn evaluate(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    method: &str,
    attributions: &[f64],
    target: &EvalTarget,
) -> Result<EvalReport> {
    Ok(EvalReport {
        method: method.to_string(),
        attributions: attributions.to_vec(),
        infidelity: infidelity(backend, pair, attributions, target)?,
        deletion: deletion_curve(backend, pair, attributions, target)?,
        comprehensiveness: comprehensiveness(backend, pair, attributions, target)?,
        sufficiency: sufficiency(backend, pair, attributions, target)?,
    })
}
