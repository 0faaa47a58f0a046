//! JSON bodies of the "tokattr/1" protocol.
//!
//! Log-probabilities travel as decimal strings with 17 significant digits
//! (`"-inf"` for zero probability), which round-trips every finite `f64`
//! exactly and keeps the format language-neutral.

use serde::{Deserialize, Serialize};
use tokattr_core::TokenId;

use crate::error::GatewayError;

pub const PROTOCOL: &str = "tokattr/1";

/// Formats a log-probability with 17 significant digits.
pub fn format_logprob(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".to_string()
    } else if x == f64::INFINITY {
        "inf".to_string()
    } else if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn parse_logprob(s: &str) -> Result<f64, GatewayError> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        "inf" => Ok(f64::INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s
            .parse::<f64>()
            .map_err(|_| GatewayError::Decode(format!("malformed log-probability {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub protocol: String,
    pub model_id: String,
    pub vocab_size: usize,
    pub special_token_ids: Vec<TokenId>,
    pub tokenizer_fingerprint: String,
    pub deterministic: bool,
    /// Optional extension: end-of-sequence token for generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_token: Option<TokenId>,
    /// Optional extension: padding token used as the removal baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_token: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensBody {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
    pub pieces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextDistRequest {
    pub context: Vec<TokenId>,
    pub top_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextDistResponse {
    /// `(token, log-probability)` sorted by descending probability.
    pub entries: Vec<(TokenId, String)>,
    pub residual_log_mass: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqJob {
    pub id: String,
    pub context: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
    pub per_token: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLogprobRequest {
    pub jobs: Vec<SeqJob>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// One job's outcome. A failed job carries `error` instead of `total`, so a
/// partially failed batch still reports every job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqResult {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLogprobResponse {
    pub results: Vec<SeqResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub context: Vec<TokenId>,
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}
