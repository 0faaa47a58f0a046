//! In-process "tokattr/1" server over any [`ScoringBackend`].
//!
//! The request handling is a pure function of the backend
//! ([`Handler::handle`]); [`GatewayServer`] only moves bytes.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tokattr_core::backend::sum_logprobs;
use tokattr_core::{Error, ScoreJob, ScoringBackend, Strategy};

use crate::error::GatewayError;
use crate::wire::*;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Protocol string reported by `/v1/info`; only tests change it.
    pub protocol: String,
    pub workers: usize,
    /// Largest accepted `seq_logprob` batch.
    pub max_batch: usize,
    /// Answer this many requests with 503 before serving normally.
    pub inject_failures: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            protocol: PROTOCOL.to_string(),
            workers: 4,
            max_batch: 4096,
            inject_failures: 0,
        }
    }
}

pub struct Handler {
    backend: Arc<dyn ScoringBackend>,
    options: ServerOptions,
    failures_left: AtomicUsize,
}

type Reply = (u16, String);

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("wire types always serialize")
}

fn error_reply(status: u16, code: &str, message: impl Into<String>) -> Reply {
    let body = ErrorResponse {
        error: ErrorBody {
            code: code.to_string(),
            message: message.into(),
        },
    };
    (status, to_json(&body))
}

fn engine_error_body(e: &Error) -> (u16, ErrorBody) {
    let (status, code) = match e.root() {
        Error::Usage(_) => (400, "bad_request"),
        Error::Degenerate(_) => (422, "degenerate"),
        Error::Transport(_) => (502, "upstream"),
        _ => (500, "internal"),
    };
    (
        status,
        ErrorBody {
            code: code.to_string(),
            message: e.to_string(),
        },
    )
}

fn engine_error(e: &Error) -> Reply {
    let (status, body) = engine_error_body(e);
    (status, to_json(&ErrorResponse { error: body }))
}

fn parse<T: DeserializeOwned>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error_reply(400, "bad_request", format!("malformed request body: {e}")))
}

impl Handler {
    pub fn new(backend: Arc<dyn ScoringBackend>, options: ServerOptions) -> Self {
        let failures_left = AtomicUsize::new(options.inject_failures);
        Self {
            backend,
            options,
            failures_left,
        }
    }

    /// Answers one request with `(status, JSON body)`.
    pub fn handle(&self, method: &str, path: &str, body: &str) -> Reply {
        let injected = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if injected {
            return error_reply(503, "unavailable", "injected failure");
        }
        let result = match (method, path) {
            ("GET", "/v1/info") => Ok(self.info()),
            ("POST", "/v1/tokenize") => self.tokenize(body),
            ("POST", "/v1/detokenize") => self.detokenize(body),
            ("POST", "/v1/next_dist") => self.next_dist(body),
            ("POST", "/v1/seq_logprob") => self.seq_logprob(body),
            ("POST", "/v1/generate") => self.generate(body),
            (_, "/v1/info" | "/v1/tokenize" | "/v1/detokenize" | "/v1/next_dist" | "/v1/seq_logprob" | "/v1/generate") => {
                Err(error_reply(405, "method_not_allowed", format!("{method} not allowed on {path}")))
            }
            _ => Err(error_reply(404, "not_found", format!("no endpoint {path}"))),
        };
        result.unwrap_or_else(|e| e)
    }

    fn info(&self) -> Reply {
        let v = self.backend.vocab();
        let info = InfoResponse {
            protocol: self.options.protocol.clone(),
            model_id: v.model_id.clone(),
            vocab_size: v.size,
            special_token_ids: v.special_token_ids.iter().copied().collect(),
            tokenizer_fingerprint: v.tokenizer_fingerprint.clone(),
            deterministic: self.backend.is_deterministic(),
            stop_token: self.backend.stop_token(),
            pad_token: self.backend.pad_token(),
        };
        (200, to_json(&info))
    }

    fn tokenize(&self, body: &str) -> Result<Reply, Reply> {
        let req: TokenizeRequest = parse(body)?;
        let tokens = self.backend.tokenize(&req.text).map_err(|e| engine_error(&e))?;
        Ok((200, to_json(&TokensBody { tokens })))
    }

    fn detokenize(&self, body: &str) -> Result<Reply, Reply> {
        let req: TokensBody = parse(body)?;
        let d = self.backend.detokenize(&req.tokens).map_err(|e| engine_error(&e))?;
        Ok((
            200,
            to_json(&DetokenizeResponse {
                text: d.text,
                pieces: d.pieces,
            }),
        ))
    }

    fn next_dist(&self, body: &str) -> Result<Reply, Reply> {
        let req: NextDistRequest = parse(body)?;
        let d = self
            .backend
            .next_dist(&req.context, req.top_mass)
            .map_err(|e| engine_error(&e))?;
        let entries = d
            .sorted_entries()
            .into_iter()
            .map(|(t, lp)| (t, format_logprob(lp)))
            .collect();
        Ok((
            200,
            to_json(&NextDistResponse {
                entries,
                residual_log_mass: format_logprob(d.residual_log_mass()),
            }),
        ))
    }

    fn seq_logprob(&self, body: &str) -> Result<Reply, Reply> {
        let req: SeqLogprobRequest = parse(body)?;
        if req.jobs.len() > self.options.max_batch {
            return Err(error_reply(
                413,
                "batch_too_large",
                format!("{} jobs exceed the limit of {}", req.jobs.len(), self.options.max_batch),
            ));
        }
        let score_jobs: Vec<ScoreJob> = req
            .jobs
            .iter()
            .map(|j| ScoreJob::new(j.context.clone(), j.continuation.clone()))
            .collect();
        let scored = self.backend.score_batch(&score_jobs);
        let results = req
            .jobs
            .iter()
            .zip(scored)
            .map(|(job, r)| {
                let r = r.and_then(|lps| {
                    if job.continuation.is_empty() {
                        Err(Error::usage("empty continuation"))
                    } else {
                        Ok(lps)
                    }
                });
                match r {
                    Ok(lps) => SeqResult {
                        id: job.id.clone(),
                        total: Some(format_logprob(sum_logprobs(&lps))),
                        per_token: job.per_token.then(|| lps.iter().map(|&x| format_logprob(x)).collect()),
                        error: None,
                    },
                    Err(e) => SeqResult {
                        id: job.id.clone(),
                        total: None,
                        per_token: None,
                        error: Some(engine_error_body(&e).1),
                    },
                }
            })
            .collect();
        Ok((200, to_json(&SeqLogprobResponse { results })))
    }

    fn generate(&self, body: &str) -> Result<Reply, Reply> {
        let req: GenerateRequest = parse(body)?;
        let strategy = match req.strategy.as_str() {
            "greedy" => Strategy::Greedy,
            "top_p" => Strategy::TopP {
                p: req
                    .p
                    .ok_or_else(|| error_reply(400, "bad_request", "top_p strategy needs p"))?,
                seed: req.seed.unwrap_or(0),
            },
            other => return Err(error_reply(400, "bad_request", format!("unknown strategy {other:?}"))),
        };
        let tokens = self
            .backend
            .generate(&req.context, &strategy, req.max_new)
            .map_err(|e| engine_error(&e))?;
        Ok((200, to_json(&TokensBody { tokens })))
    }
}

/// A running HTTP server; stops when dropped.
pub struct GatewayServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

impl GatewayServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(
        backend: Arc<dyn ScoringBackend>,
        addr: &str,
        options: ServerOptions,
    ) -> Result<Self, GatewayError> {
        let server = tiny_http::Server::http(addr).map_err(|e| GatewayError::Transport(format!("bind {addr}: {e}")))?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| GatewayError::Transport("server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let workers = options.workers.max(1);
        let handler = Arc::new(Handler::new(backend, options));
        let workers = (0..workers)
            .map(|_| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || serve_loop(&server, &handler))
            })
            .collect();
        Ok(Self {
            addr: local,
            server,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Serves until the process exits.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for GatewayServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve_loop(server: &tiny_http::Server, handler: &Handler) {
    while let Ok(mut request) = server.recv() {
        let mut body = String::new();
        let (status, reply) = match request.as_reader().read_to_string(&mut body) {
            Ok(_) => {
                let path = request.url().split('?').next().unwrap_or("").to_string();
                handler.handle(request.method().as_str(), &path, &body)
            }
            Err(e) => error_reply(400, "bad_request", format!("unreadable body: {e}")),
        };
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
            .expect("static header is valid");
        let response = tiny_http::Response::from_string(reply)
            .with_status_code(status)
            .with_header(header);
        let _ = request.respond(response);
    }
}
