//! Protocol conformance suite runnable against any "tokattr/1" endpoint.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokattr_core::{ScoringBackend, TokenId};

use crate::client::{GatewayClient, GatewayEndpoint};
use crate::error::GatewayError;
use crate::probe::{probe_determinism, probe_sequence, DEFAULT_PROBE_REPEATS};
use crate::wire::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl ConformanceCheck {
    fn new(name: &str, result: Result<String, String>) -> Self {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformanceOptions {
    /// Tolerance for chain-rule and normalization checks (model arithmetic,
    /// not the wire format, decides how tight this can be).
    pub tolerance: f64,
}

impl Default for ConformanceOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9 }
    }
}

/// Whether `s` is a 17-significant-digit decimal as produced by
/// [`format_logprob`] (or `-inf`).
pub fn is_wire_decimal(s: &str) -> bool {
    if s == "-inf" {
        return true;
    }
    let Some((mantissa, exp)) = s.split_once('e') else {
        return false;
    };
    let digits = mantissa.trim_start_matches('-').replace('.', "");
    digits.len() == 17 && digits.bytes().all(|b| b.is_ascii_digit()) && exp.parse::<i32>().is_ok()
}

type Check = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_version(endpoint: &GatewayEndpoint, client: &GatewayClient) -> Check {
    if client.info().protocol != PROTOCOL {
        return Err(format!("info reports {:?}", client.info().protocol));
    }
    let mut wrong = endpoint.clone();
    wrong.protocol = "tokattr/0".into();
    match GatewayClient::connect(wrong) {
        Err(GatewayError::VersionMismatch { .. }) => Ok(format!("{PROTOCOL}; mismatched client refused")),
        Err(e) => Err(format!("mismatched client failed with the wrong error: {e}")),
        Ok(_) => Err("client expecting another protocol connected".into()),
    }
}

fn check_round_trip(client: &GatewayClient) -> Check {
    let seq = probe_sequence(client.info().vocab_size);
    let body = serde_json::to_string(&NextDistRequest {
        context: seq[..3].to_vec(),
        top_mass: 1.0,
    })
    .map_err(err)?;
    let (status, text) = client.raw_request("POST", "/v1/next_dist", Some(&body)).map_err(err)?;
    if status != 200 {
        return Err(format!("next_dist returned {status}"));
    }
    let reply: NextDistResponse = serde_json::from_str(&text).map_err(err)?;
    let jobs = SeqLogprobRequest {
        jobs: vec![SeqJob {
            id: "rt".into(),
            context: seq[..3].to_vec(),
            continuation: seq[3..].to_vec(),
            per_token: true,
        }],
    };
    let (_, text) = client
        .raw_request("POST", "/v1/seq_logprob", Some(&serde_json::to_string(&jobs).map_err(err)?))
        .map_err(err)?;
    let seq_reply: SeqLogprobResponse = serde_json::from_str(&text).map_err(err)?;
    let mut strings: Vec<String> = reply.entries.iter().map(|e| e.1.clone()).collect();
    strings.push(reply.residual_log_mass.clone());
    for r in &seq_reply.results {
        strings.extend(r.total.clone());
        strings.extend(r.per_token.clone().unwrap_or_default());
    }
    for s in &strings {
        if !is_wire_decimal(s) {
            return Err(format!("{s:?} is not a 17-significant-digit decimal"));
        }
        let x = parse_logprob(s).map_err(err)?;
        if format_logprob(x) != *s {
            return Err(format!("{s:?} does not survive parse and re-format"));
        }
    }
    let sorted = reply
        .entries
        .windows(2)
        .all(|w| parse_logprob(&w[0].1).unwrap_or(f64::NAN) >= parse_logprob(&w[1].1).unwrap_or(f64::NAN));
    if !sorted {
        return Err("next_dist entries are not sorted by descending probability".into());
    }
    Ok(format!("{} values round-trip exactly", strings.len()))
}

fn check_consistency(client: &GatewayClient, tol: f64) -> Check {
    let seq = probe_sequence(client.info().vocab_size);
    let (ctx, cont) = seq.split_at(4);
    let dist = client.next_dist(ctx, 1.0).map_err(err)?;
    let mass = dist.total_log_mass().exp();
    if (mass - 1.0).abs() > tol.max(1e-12) {
        return Err(format!("next_dist mass {mass}"));
    }
    let mut chained = 0.0;
    for (i, &t) in cont.iter().enumerate() {
        let mut c = ctx.to_vec();
        c.extend(&cont[..i]);
        chained += client.next_dist(&c, 1.0).map_err(err)?.log_prob(t).unwrap_or(f64::NEG_INFINITY);
    }
    let total = client.seq_logprob(ctx, cont).map_err(err)?;
    if (total - chained).abs() > tol {
        return Err(format!("seq_logprob {total} vs chained next_dist {chained}"));
    }
    Ok(format!("mass {mass}, chain-rule gap {:e}", (total - chained).abs()))
}

fn probe_jobs(vocab_size: usize) -> Vec<SeqJob> {
    let seq = probe_sequence(vocab_size);
    (1..seq.len())
        .map(|split| SeqJob {
            id: format!("job{split}"),
            context: seq[..split].to_vec(),
            continuation: seq[split..].to_vec(),
            per_token: split % 2 == 0,
        })
        .collect()
}

fn bits(r: &Result<crate::client::JobScores, GatewayError>) -> Option<(u64, Option<Vec<u64>>)> {
    r.as_ref()
        .ok()
        .map(|s| (s.total.to_bits(), s.per_token.as_ref().map(|v| v.iter().map(|x| x.to_bits()).collect())))
}

fn check_batching(endpoint: &GatewayEndpoint, client: &GatewayClient) -> Check {
    let jobs = probe_jobs(client.info().vocab_size);
    let whole = client.batch_seq_logprob(&jobs).map_err(err)?;
    if whole.iter().any(|r| r.is_err()) {
        return Err("a valid job failed".into());
    }
    for (j, r) in jobs.iter().zip(&whole) {
        let single = client.batch_seq_logprob(std::slice::from_ref(j)).map_err(err)?;
        if bits(&single[0]) != bits(r) {
            return Err(format!("job {} differs between batch and single call", j.id));
        }
    }
    let split_client = GatewayClient::connect(endpoint.clone().with_max_batch(jobs.len().div_ceil(2))).map_err(err)?;
    let split = split_client.batch_seq_logprob(&jobs).map_err(err)?;
    if split.iter().map(bits).ne(whole.iter().map(bits)) {
        return Err("a batch split across two requests differs from one batch".into());
    }
    let mut reversed = jobs.clone();
    reversed.reverse();
    let rev = client.batch_seq_logprob(&reversed).map_err(err)?;
    if rev.iter().rev().map(bits).ne(whole.iter().map(bits)) {
        return Err("results depend on job order".into());
    }
    let dup = vec![jobs[0].clone(), jobs[0].clone()];
    let d = client.batch_seq_logprob(&dup).map_err(err)?;
    if bits(&d[0]) != bits(&d[1]) || bits(&d[0]) != bits(&whole[0]) {
        return Err("duplicate jobs disagree".into());
    }
    Ok(format!("{} jobs agree across single, split, reversed and duplicate batches", jobs.len()))
}

fn check_partial_failure(client: &GatewayClient) -> Check {
    let mut jobs = probe_jobs(client.info().vocab_size);
    jobs.truncate(3);
    let bad_token = client.info().vocab_size as TokenId;
    jobs.insert(
        1,
        SeqJob {
            id: "bad".into(),
            context: vec![bad_token],
            continuation: vec![0],
            per_token: false,
        },
    );
    let body = serde_json::to_string(&SeqLogprobRequest { jobs: jobs.clone() }).map_err(err)?;
    let (status, text) = client.raw_request("POST", "/v1/seq_logprob", Some(&body)).map_err(err)?;
    if status != 200 {
        return Err(format!("partially failing batch returned {status}"));
    }
    let reply: SeqLogprobResponse = serde_json::from_str(&text).map_err(err)?;
    if reply.results.len() != jobs.len() {
        return Err(format!("{} results for {} jobs", reply.results.len(), jobs.len()));
    }
    for (j, r) in jobs.iter().zip(&reply.results) {
        if r.id != j.id {
            return Err(format!("result {} out of place", r.id));
        }
        let failed = r.error.is_some();
        if failed != (j.id == "bad") || failed == r.total.is_some() {
            return Err(format!("job {} reported wrongly", j.id));
        }
    }
    let decoded = client.batch_seq_logprob(&jobs).map_err(err)?;
    match &decoded[1] {
        Err(GatewayError::Job { id, .. }) if id == "bad" => {}
        other => return Err(format!("client decoded the bad job as {other:?}")),
    }
    Ok("bad job reported by ID, others scored".into())
}

fn check_error_envelope(client: &GatewayClient) -> Check {
    for (method, path, body) in [
        ("GET", "/v1/unknown", None),
        ("POST", "/v1/next_dist", Some("{not json")),
        ("POST", "/v1/generate", Some(r#"{"context":[],"strategy":"beam","max_new":1}"#)),
    ] {
        let (status, text) = client.raw_request(method, path, body).map_err(err)?;
        if status == 200 {
            return Err(format!("{method} {path} succeeded"));
        }
        serde_json::from_str::<ErrorResponse>(&text).map_err(|e| format!("{method} {path}: no envelope ({e})"))?;
    }
    Ok("errors carry {error:{code,message}} with non-200 status".into())
}

fn check_probe(client: &GatewayClient) -> Check {
    let report = probe_determinism(client, DEFAULT_PROBE_REPEATS).map_err(err)?;
    if report.passed != report.declared_deterministic {
        return Err(format!(
            "declares deterministic={} but probe {}",
            report.declared_deterministic,
            if report.passed { "passed" } else { "failed" }
        ));
    }
    Ok(format!(
        "probe {} ({} distinct of {})",
        if report.passed { "PASS" } else { "FAIL" },
        report.distinct_responses,
        report.repeats
    ))
}

/// Runs every check; a connection failure yields a single failed check.
pub fn run_conformance(endpoint: &GatewayEndpoint, options: ConformanceOptions) -> Vec<ConformanceCheck> {
    let client = match GatewayClient::connect(endpoint.clone()) {
        Ok(c) => c,
        Err(e) => return vec![ConformanceCheck::new("connect", Err(e.to_string()))],
    };
    vec![
        ConformanceCheck::new("version", check_version(endpoint, &client)),
        ConformanceCheck::new("decimal_round_trip", check_round_trip(&client)),
        ConformanceCheck::new("consistency", check_consistency(&client, options.tolerance)),
        ConformanceCheck::new("batch_equivalence", check_batching(endpoint, &client)),
        ConformanceCheck::new("partial_failure", check_partial_failure(&client)),
        ConformanceCheck::new("error_envelope", check_error_envelope(&client)),
        ConformanceCheck::new("determinism_probe", check_probe(&client)),
    ]
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub method: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
    pub status: u16,
    pub response: Value,
}

/// The request set recorded in golden transcripts.
pub fn golden_requests() -> Vec<(&'static str, &'static str, Option<Value>)> {
    use serde_json::json;
    vec![
        ("GET", "/v1/info", None),
        ("POST", "/v1/tokenize", Some(json!({"text": "0 1 2"}))),
        ("POST", "/v1/detokenize", Some(json!({"tokens": [2, 1, 0]}))),
        ("POST", "/v1/next_dist", Some(json!({"context": [], "top_mass": 1.0}))),
        ("POST", "/v1/next_dist", Some(json!({"context": [0, 1], "top_mass": 1.0}))),
        ("POST", "/v1/next_dist", Some(json!({"context": [2], "top_mass": 0.5}))),
        (
            "POST",
            "/v1/seq_logprob",
            Some(json!({"jobs": [
                {"id": "a", "context": [0], "continuation": [1, 2], "per_token": true},
                {"id": "b", "context": [], "continuation": [2], "per_token": false},
                {"id": "c", "context": [7], "continuation": [0], "per_token": false}
            ]})),
        ),
        ("POST", "/v1/generate", Some(json!({"context": [0], "strategy": "greedy", "max_new": 3}))),
        ("POST", "/v1/generate", Some(json!({"context": [1], "strategy": "top_p", "p": 0.9, "seed": 4, "max_new": 3}))),
        ("GET", "/v1/missing", None),
    ]
}

pub fn record_transcript(client: &GatewayClient) -> Result<Vec<TranscriptEntry>, GatewayError> {
    golden_requests()
        .into_iter()
        .map(|(method, path, request)| {
            let body = request.as_ref().map(|v| v.to_string());
            let (status, text) = client.raw_request(method, path, body.as_deref())?;
            let response = serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
            Ok(TranscriptEntry {
                method: method.to_string(),
                path: path.to_string(),
                request,
                status,
                response,
            })
        })
        .collect()
}

/// Replays a transcript; one check per entry, passing iff status and body
/// match exactly.
pub fn replay_transcript(client: &GatewayClient, transcript: &[TranscriptEntry]) -> Vec<ConformanceCheck> {
    transcript
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let body = e.request.as_ref().map(|v| v.to_string());
            let result = client
                .raw_request(&e.method, &e.path, body.as_deref())
                .map_err(err)
                .and_then(|(status, text)| {
                    let got: Value = serde_json::from_str(&text).map_err(err)?;
                    if status == e.status && got == e.response {
                        Ok("identical".to_string())
                    } else {
                        Err(format!("got {status} {got}"))
                    }
                });
            ConformanceCheck::new(&format!("golden[{i}] {} {}", e.method, e.path), result)
        })
        .collect()
}
