//! Probabilistic token attribution for autoregressive language models.
//!
//! The engine reconstructs a model's distribution over texts from
//! next-token log-probabilities and uses it to score how strongly each
//! prompt token shapes a given response. Entry points:
//!
//! - [`attribution::attribute_all`] — per-position scores, contextual
//!   entropies and divergences in one pass.
//! - [`replacement::replacement_experiment`] — response stability when a
//!   prompt token is swapped for likely alternatives.
//! - [`eval`] — faithfulness metrics for any attribution vector.
//! - [`toy::TabularLM`] — an exactly enumerable model used as backend and
//!   as ground truth.
//!
//! All quantities are in nats.

pub mod attribution;
pub mod backend;
pub mod context;
pub mod dist;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod info;
pub mod parallel;
pub mod record;
pub mod replacement;
pub mod toy;
pub mod vocab;

pub use attribution::{attribute_all, attribution_score, AttributionConfig, AttributionScore, DenominatorParts};
pub use backend::{cached, CachedBackend, Detokenized, ScoreJob, ScoringBackend, Strategy};
pub use dist::{log_sum_exp, LogDistribution};
pub use error::{Error, Result};
pub use info::{entropy, kl_divergence};
pub use record::{AttributionRecord, Bucket, Candidate};
pub use toy::TabularLM;
pub use vocab::{PromptResponsePair, TokenId, TokenSequence, VocabInfo};

/// Engine version embedded in run manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
