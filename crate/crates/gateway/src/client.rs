//! [`ScoringBackend`] over HTTP.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tokattr_core::dist::EPS_REAL;
use tokattr_core::{Detokenized, LogDistribution, ScoreJob, ScoringBackend, Strategy, TokenId, VocabInfo};

use crate::error::GatewayError;
use crate::wire::*;

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Jobs per `seq_logprob` request; larger sets are split.
    pub max_batch: usize,
    /// Bound on concurrent requests from one client.
    pub max_in_flight: usize,
    /// Protocol the client insists on.
    pub protocol: String,
}

impl GatewayEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_batch: 64,
            max_in_flight: 8,
            protocol: PROTOCOL.to_string(),
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Parsed result of one `seq_logprob` job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobScores {
    pub total: f64,
    pub per_token: Option<Vec<f64>>,
}

pub struct GatewayClient {
    endpoint: GatewayEndpoint,
    agent: ureq::Agent,
    info: InfoResponse,
    vocab: Arc<VocabInfo>,
    slots: Slots,
}

impl GatewayClient {
    /// Fetches `/v1/info` and checks the protocol version.
    pub fn connect(endpoint: GatewayEndpoint) -> Result<Self, GatewayError> {
        if endpoint.max_batch == 0 || endpoint.max_in_flight == 0 {
            return Err(GatewayError::Decode("batch size and in-flight bound must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new().timeout(endpoint.timeout).build();
        let slots = Slots {
            free: Mutex::new(endpoint.max_in_flight),
            cv: Condvar::new(),
        };
        let mut client = Self {
            endpoint,
            agent,
            info: InfoResponse {
                protocol: String::new(),
                model_id: String::new(),
                vocab_size: 0,
                special_token_ids: vec![],
                tokenizer_fingerprint: String::new(),
                deterministic: false,
                stop_token: None,
                pad_token: None,
            },
            vocab: Arc::new(VocabInfo::new(2, "", "", []).expect("placeholder vocabulary is valid")),
            slots,
        };
        let info: InfoResponse = client.call("GET", "/v1/info", None::<&()>)?;
        if info.protocol != client.endpoint.protocol {
            return Err(GatewayError::VersionMismatch {
                expected: client.endpoint.protocol.clone(),
                found: info.protocol,
            });
        }
        client.vocab = Arc::new(
            VocabInfo::new(
                info.vocab_size,
                info.model_id.clone(),
                info.tokenizer_fingerprint.clone(),
                info.special_token_ids.iter().copied(),
            )
            .map_err(|e| GatewayError::Decode(e.to_string()))?,
        );
        client.info = info;
        Ok(client)
    }

    pub fn info(&self) -> &InfoResponse {
        &self.info
    }

    pub fn endpoint(&self) -> &GatewayEndpoint {
        &self.endpoint
    }

    /// One HTTP exchange without retries or decoding: `(status, body)`.
    pub fn raw_request(&self, method: &str, path: &str, body: Option<&str>) -> Result<(u16, String), GatewayError> {
        let _slot = self.slots.acquire();
        let url = format!("{}{}", self.endpoint.base_url, path);
        let req = self.agent.request(method, &url);
        let result = match body {
            Some(b) => req.set("Content-Type", "application/json").send_string(b),
            None => req.call(),
        };
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => return Err(GatewayError::Transport(t.to_string())),
        };
        let status = response.status();
        let text = response
            .into_string()
            .map_err(|e| GatewayError::Transport(format!("reading reply: {e}")))?;
        Ok((status, text))
    }

    fn call_once<R: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&str>) -> Result<R, GatewayError> {
        let (status, text) = self.raw_request(method, path, body)?;
        if status != 200 {
            return Err(match serde_json::from_str::<ErrorResponse>(&text) {
                Ok(e) => GatewayError::Remote {
                    status,
                    code: e.error.code,
                    message: e.error.message,
                },
                Err(_) => GatewayError::Decode(format!("status {status} without an error envelope")),
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Decode(format!("{path}: {e}")))
    }

    /// Request with retries on transport failures and 5xx replies. Every
    /// endpoint is idempotent, so resending is safe.
    fn call<B: Serialize, R: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&B>) -> Result<R, GatewayError> {
        let body = body.map(|b| serde_json::to_string(b).expect("wire types always serialize"));
        let mut delay = self.endpoint.retry.backoff;
        let mut attempt = 0;
        loop {
            match self.call_once(method, path, body.as_deref()) {
                Err(e) if e.is_retryable() && attempt < self.endpoint.retry.retries => {
                    attempt += 1;
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    /// Scores `jobs`, splitting them into requests of at most `max_batch`.
    ///
    /// The outer error means a whole request failed; inner errors are
    /// per-job failures reported by the gateway. Results are matched to jobs
    /// by ID, so job IDs must be unique unless the jobs are identical.
    pub fn batch_seq_logprob(&self, jobs: &[SeqJob]) -> Result<Vec<Result<JobScores, GatewayError>>, GatewayError> {
        let mut by_id: HashMap<&str, &SeqJob> = HashMap::new();
        for j in jobs {
            if let Some(prev) = by_id.insert(&j.id, j) {
                if prev != j {
                    return Err(GatewayError::Decode(format!("job ID {} names two different jobs", j.id)));
                }
            }
        }
        let mut outcomes: HashMap<String, Result<JobScores, GatewayError>> = HashMap::new();
        for chunk in jobs.chunks(self.endpoint.max_batch) {
            let req = SeqLogprobRequest { jobs: chunk.to_vec() };
            let resp: SeqLogprobResponse = self.call("POST", "/v1/seq_logprob", Some(&req))?;
            for r in resp.results {
                let outcome = decode_result(&r);
                outcomes.entry(r.id).or_insert(outcome);
            }
        }
        Ok(jobs
            .iter()
            .map(|j| {
                outcomes.get(&j.id).cloned().unwrap_or_else(|| {
                    Err(GatewayError::Job {
                        id: j.id.clone(),
                        code: "missing".into(),
                        message: "gateway returned no result for this job".into(),
                    })
                })
            })
            .collect())
    }

    fn single_job(&self, context: &[TokenId], continuation: &[TokenId], per_token: bool) -> tokattr_core::Result<JobScores> {
        let job = SeqJob {
            id: "0".into(),
            context: context.to_vec(),
            continuation: continuation.to_vec(),
            per_token,
        };
        let mut out = self.batch_seq_logprob(&[job])?;
        Ok(out.pop().expect("one result per job")?)
    }
}

fn decode_result(r: &SeqResult) -> Result<JobScores, GatewayError> {
    if let Some(e) = &r.error {
        return Err(GatewayError::Job {
            id: r.id.clone(),
            code: e.code.clone(),
            message: e.message.clone(),
        });
    }
    let total = r
        .total
        .as_deref()
        .ok_or_else(|| GatewayError::Decode(format!("job {} has neither total nor error", r.id)))
        .and_then(parse_logprob)?;
    let per_token = r
        .per_token
        .as_ref()
        .map(|v| v.iter().map(|s| parse_logprob(s)).collect::<Result<Vec<_>, _>>())
        .transpose()?;
    Ok(JobScores { total, per_token })
}

/// Rebuilds a distribution from a `next_dist` reply. A reply listing every
/// token once becomes a dense distribution.
pub fn decode_next_dist(size: usize, reply: &NextDistResponse) -> Result<LogDistribution, GatewayError> {
    let entries = reply
        .entries
        .iter()
        .map(|(t, s)| parse_logprob(s).map(|lp| (*t, lp)))
        .collect::<Result<Vec<_>, _>>()?;
    let residual = parse_logprob(&reply.residual_log_mass)?;
    let bad = |e: tokattr_core::Error| GatewayError::Decode(e.to_string());
    let mut seen = vec![false; size];
    let complete = entries.len() == size
        && entries
            .iter()
            .all(|&(t, _)| (t as usize) < size && !std::mem::replace(&mut seen[t as usize], true));
    if complete && residual == f64::NEG_INFINITY {
        let mut dense = vec![f64::NEG_INFINITY; size];
        for (t, lp) in entries {
            dense[t as usize] = lp;
        }
        LogDistribution::dense(dense, EPS_REAL).map_err(bad)
    } else {
        LogDistribution::sparse(size, entries, residual, EPS_REAL).map_err(bad)
    }
}

impl ScoringBackend for GatewayClient {
    fn vocab(&self) -> Arc<VocabInfo> {
        Arc::clone(&self.vocab)
    }

    fn is_deterministic(&self) -> bool {
        self.info.deterministic
    }

    fn describe(&self) -> String {
        format!("gateway:{} ({})", self.endpoint.base_url, self.info.model_id)
    }

    fn next_dist(&self, context: &[TokenId], top_mass: f64) -> tokattr_core::Result<LogDistribution> {
        let req = NextDistRequest {
            context: context.to_vec(),
            top_mass,
        };
        let reply: NextDistResponse = self.call("POST", "/v1/next_dist", Some(&req))?;
        Ok(decode_next_dist(self.vocab.size, &reply)?)
    }

    fn token_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> tokattr_core::Result<Vec<f64>> {
        self.single_job(context, continuation, true)?
            .per_token
            .ok_or_else(|| GatewayError::Decode("per-token scores missing".into()).into())
    }

    fn score_batch(&self, jobs: &[ScoreJob]) -> Vec<tokattr_core::Result<Vec<f64>>> {
        let wire: Vec<SeqJob> = jobs
            .iter()
            .enumerate()
            .map(|(i, j)| SeqJob {
                id: i.to_string(),
                context: j.context.clone(),
                continuation: j.continuation.clone(),
                per_token: true,
            })
            .collect();
        match self.batch_seq_logprob(&wire) {
            Ok(results) => results
                .into_iter()
                .map(|r| {
                    r.map_err(Into::into).and_then(|s| {
                        s.per_token
                            .ok_or_else(|| GatewayError::Decode("per-token scores missing".into()).into())
                    })
                })
                .collect(),
            Err(e) => {
                let e: tokattr_core::Error = e.into();
                jobs.iter().map(|_| Err(e.clone())).collect()
            }
        }
    }

    fn seq_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> tokattr_core::Result<f64> {
        if continuation.is_empty() {
            return Err(tokattr_core::Error::usage("seq_logprob needs a non-empty continuation"));
        }
        Ok(self.single_job(context, continuation, false)?.total)
    }

    fn generate(&self, context: &[TokenId], strategy: &Strategy, max_new: usize) -> tokattr_core::Result<Vec<TokenId>> {
        let (p, seed) = match *strategy {
            Strategy::Greedy => (None, None),
            Strategy::TopP { p, seed } => (Some(p), Some(seed)),
        };
        let req = GenerateRequest {
            context: context.to_vec(),
            strategy: strategy.name().to_string(),
            p,
            seed,
            max_new,
        };
        let reply: TokensBody = self.call("POST", "/v1/generate", Some(&req))?;
        Ok(reply.tokens)
    }

    fn stop_token(&self) -> Option<TokenId> {
        self.info.stop_token
    }

    fn pad_token(&self) -> Option<TokenId> {
        self.info.pad_token
    }

    fn tokenize(&self, text: &str) -> tokattr_core::Result<Vec<TokenId>> {
        let req = TokenizeRequest { text: text.to_string() };
        let reply: TokensBody = self.call("POST", "/v1/tokenize", Some(&req))?;
        Ok(reply.tokens)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> tokattr_core::Result<Detokenized> {
        let req = TokensBody { tokens: tokens.to_vec() };
        let reply: DetokenizeResponse = self.call("POST", "/v1/detokenize", Some(&req))?;
        Ok(Detokenized {
            text: reply.text,
            pieces: reply.pieces,
        })
    }
}
