//! Contextual entropies of a prompt position and their divergence.
//!
//! `q_P` is the distribution of the token at `μ` given the rest of the prompt;
//! `q_PR` additionally conditions on the response. Both come from the same
//! factors as the attribution score, so no extra backend calls are made.

use serde::{Deserialize, Serialize};

use crate::attribution::{all_parts, denominator_parts, AttributionConfig, DenominatorParts};
use crate::dist::{log_sum_exp_unchecked, LogDistribution};
use crate::error::Result;
use crate::info::{entropy, kl_divergence};
use crate::record::{AttributionRecord, Bucket, Candidate};
use crate::vocab::PromptResponsePair;
use crate::ScoringBackend;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualDistributions {
    pub position: usize,
    pub q_p: LogDistribution,
    pub q_pr: LogDistribution,
}

fn build(size: usize, entries: Vec<(u32, f64)>) -> Result<LogDistribution> {
    let z = log_sum_exp_unchecked(&entries.iter().map(|e| e.1).collect::<Vec<_>>());
    let entries = entries.into_iter().map(|(t, lp)| (t, lp - z)).collect::<Vec<_>>();
    if entries.len() == size {
        LogDistribution::dense(entries.into_iter().map(|e| e.1).collect(), 1e-9)
    } else {
        LogDistribution::sparse(size, entries, f64::NEG_INFINITY, 1e-9)
    }
}

/// Both contextual distributions from attribution factors. Truncated parts
/// give distributions over the included replacements only.
pub fn contextual_from_parts(parts: &DenominatorParts) -> Result<ContextualDistributions> {
    let q_p = build(
        parts.vocab_size,
        parts.replacements.iter().map(|r| (r.token, r.log_bayes)).collect(),
    )?;
    let q_pr = build(
        parts.vocab_size,
        parts
            .replacements
            .iter()
            .map(|r| (r.token, r.log_bayes + r.response_logprob))
            .collect(),
    )?;
    Ok(ContextualDistributions {
        position: parts.position,
        q_p,
        q_pr,
    })
}

pub fn contextual_dists(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    position: usize,
    top_mass: f64,
) -> Result<ContextualDistributions> {
    let config = AttributionConfig::default().with_top_mass(top_mass);
    contextual_from_parts(&denominator_parts(backend, pair, position, &config)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextualEntropies {
    pub position: usize,
    pub s_p: f64,
    pub s_pr: f64,
    pub kl_mu: f64,
}

pub fn contextual_entropies(
    backend: &dyn ScoringBackend,
    pair: &PromptResponsePair,
    config: &AttributionConfig,
) -> Result<Vec<ContextualEntropies>> {
    all_parts(backend, pair, config)?
        .iter()
        .map(|p| {
            let c = contextual_from_parts(p)?;
            Ok(ContextualEntropies {
                position: p.position,
                s_p: entropy(&c.q_p)?,
                s_pr: entropy(&c.q_pr)?,
                kl_mu: kl_divergence(&c.q_p, &c.q_pr)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThresholds {
    /// KL (nats) above which a near-zero position is flagged.
    pub kl: f64,
    /// Margin (nats) by which `S_PR` must exceed `S_P`.
    pub entropy_margin: f64,
}

impl Default for AnomalyThresholds {
    fn default() -> Self {
        Self {
            kl: 1.0,
            entropy_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Near-zero score but the response moved the token distribution a lot.
    HighDivergence,
    /// Near-zero score and the response broadened the token distribution.
    EntropyBroadened,
    /// Near-zero score with prompt-only entropy above the high-bucket mean.
    NoiseToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub position: usize,
    pub kind: AnomalyKind,
    pub token_id: u32,
    pub token_text: String,
    #[serde(with = "crate::record::float_repr")]
    pub a_mu: f64,
    #[serde(with = "crate::record::float_repr")]
    pub s_p: f64,
    #[serde(with = "crate::record::float_repr")]
    pub s_pr: f64,
    #[serde(with = "crate::record::float_repr")]
    pub kl_mu: f64,
    pub candidates_p: Vec<Candidate>,
    pub candidates_pr: Vec<Candidate>,
}

/// Mean `S_P` per bucket, `None` for empty buckets.
pub fn bucket_means(records: &[AttributionRecord]) -> Vec<(Bucket, Option<f64>)> {
    Bucket::ALL
        .iter()
        .map(|&b| {
            let v: Vec<f64> = records.iter().filter(|r| r.bucket == b).map(|r| r.s_p).collect();
            let mean = if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            };
            (b, mean)
        })
        .collect()
}

/// Flags near-zero positions whose entropy statistics look unusual.
/// Output is ordered by position, then kind.
pub fn flag_anomalies(records: &[AttributionRecord], thresholds: &AnomalyThresholds) -> Vec<Anomaly> {
    let high_mean = bucket_means(records)
        .into_iter()
        .find(|(b, _)| *b == Bucket::High)
        .and_then(|(_, m)| m);
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.bucket == Bucket::NearZero) {
        let mut kinds = Vec::new();
        if r.kl_mu > thresholds.kl {
            kinds.push(AnomalyKind::HighDivergence);
        }
        if r.s_pr > r.s_p + thresholds.entropy_margin {
            kinds.push(AnomalyKind::EntropyBroadened);
        }
        if let Some(m) = high_mean {
            if r.s_p > m {
                kinds.push(AnomalyKind::NoiseToken);
            }
        }
        for kind in kinds {
            out.push(Anomaly {
                position: r.position,
                kind,
                token_id: r.token_id,
                token_text: r.token_text.clone(),
                a_mu: r.a_mu,
                s_p: r.s_p,
                s_pr: r.s_pr,
                kl_mu: r.kl_mu,
                candidates_p: r.candidates_p.clone(),
                candidates_pr: r.candidates_pr.clone(),
            });
        }
    }
    out.sort_by(|a, b| a.position.cmp(&b.position).then(a.kind.cmp(&b.kind)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(position: usize, a_mu: f64, s_p: f64, s_pr: f64, kl_mu: f64) -> AttributionRecord {
        AttributionRecord {
            position,
            token_id: position as u32,
            token_text: format!("t{position}"),
            a_mu,
            s_p,
            s_pr,
            kl_mu,
            bucket: Bucket::classify(a_mu, (-0.1, 0.1)),
            truncation_bound: 0.0,
            replacement_count: 4,
            excluded_special: vec![],
            kl_support_renormalized: false,
            candidates_p: vec![Candidate { token_id: 1, prob: 0.9 }],
            candidates_pr: vec![],
        }
    }

    #[test]
    fn large_kl_at_near_zero_is_flagged() {
        let flags = flag_anomalies(&[rec(0, 0.01, 0.2, 0.1, 12.15)], &AnomalyThresholds::default());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, AnomalyKind::HighDivergence);
        assert_eq!(flags[0].kl_mu, 12.15);
        assert_eq!(flags[0].candidates_p.len(), 1);
    }

    #[test]
    fn broadened_entropy_is_flagged() {
        let flags = flag_anomalies(&[rec(3, -0.02, 0.3, 0.9, 0.2)], &AnomalyThresholds::default());
        assert_eq!(flags.iter().map(|f| f.kind).collect::<Vec<_>>(), vec![AnomalyKind::EntropyBroadened]);
    }

    #[test]
    fn noise_token_needs_high_bucket_reference() {
        let recs = [rec(0, 0.0, 1.2, 1.0, 0.01), rec(1, 2.0, 0.5, 0.1, 0.3), rec(2, 3.0, 0.7, 0.1, 0.3)];
        let flags = flag_anomalies(&recs, &AnomalyThresholds::default());
        assert_eq!(flags.len(), 1);
        assert_eq!((flags[0].position, flags[0].kind), (0, AnomalyKind::NoiseToken));
        assert!(flag_anomalies(&recs[..1], &AnomalyThresholds::default()).is_empty());
    }

    #[test]
    fn quiet_records_raise_nothing() {
        let recs = [rec(0, 0.05, 0.1, 0.05, 0.01), rec(1, -0.05, 0.2, 0.1, 0.02), rec(2, 1.0, 0.9, 0.3, 2.0)];
        assert!(flag_anomalies(&recs, &AnomalyThresholds::default()).is_empty());
    }

    #[test]
    fn bucket_means_are_plain_means() {
        let recs = [rec(0, 0.0, 1.0, 1.0, 0.0), rec(1, 0.05, 2.0, 1.0, 0.0), rec(2, 1.0, 0.5, 0.1, 0.0)];
        let means = bucket_means(&recs);
        assert_eq!(means[0], (Bucket::Negative, None));
        assert_eq!(means[1], (Bucket::NearZero, Some(1.5)));
        assert_eq!(means[2], (Bucket::High, Some(0.5)));
    }
}
