//! Backend resolution, the determinism gate and prompt/response input.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};
use tokattr_core::{
    cached, PromptResponsePair, ScoringBackend, Strategy, TabularLM, TokenId, TokenSequence,
};
use tokattr_gateway::testing::Jittered;
use tokattr_gateway::{probe_determinism, GatewayClient, GatewayEndpoint, GATEWAY_ENV};

use crate::args::{BackendArgs, DecodeArgs, PairArgs, StrategyName};
use crate::failure::{CliResult, Failure, Kind};

const CACHE_CAPACITY: usize = 1 << 16;

pub struct Backend {
    /// Memoized backend used for all analysis calls.
    pub scoring: Arc<dyn ScoringBackend>,
    /// Backend descriptor for the manifest.
    pub descriptor: Value,
    /// Probe report and override flag for the manifest.
    pub determinism: Value,
}

fn resolve_spec(spec: Option<&str>) -> CliResult<String> {
    if let Some(s) = spec {
        return Ok(s.to_string());
    }
    match std::env::var(GATEWAY_ENV) {
        Ok(url) if !url.is_empty() => Ok(if url.starts_with("gateway:") {
            url
        } else {
            format!("gateway:{url}")
        }),
        _ => Err(Failure::usage(format!("no --backend given and {GATEWAY_ENV} is unset"))),
    }
}

/// Opens the raw backend named by `toy:<path>`, `toy-jitter:<path>` or
/// `gateway:<url>`.
pub fn open_raw(spec: Option<&str>, parallelism: usize) -> CliResult<(Arc<dyn ScoringBackend>, Value)> {
    let spec = resolve_spec(spec)?;
    if let Some(path) = spec.strip_prefix("toy:") {
        let m = TabularLM::load(Path::new(path))?;
        let descriptor = toy_descriptor(&spec, &m);
        return Ok((Arc::new(m), descriptor));
    }
    if let Some(path) = spec.strip_prefix("toy-jitter:") {
        let m = TabularLM::load(Path::new(path))?;
        let descriptor = toy_descriptor(&spec, &m);
        return Ok((Arc::new(Jittered::new(m, tokattr_gateway::testing::DEFAULT_JITTER)), descriptor));
    }
    if let Some(url) = spec.strip_prefix("gateway:") {
        let mut endpoint = GatewayEndpoint::new(url);
        endpoint.max_in_flight = parallelism.max(1);
        let client = GatewayClient::connect(endpoint)?;
        let descriptor = json!({
            "spec": spec,
            "kind": "gateway",
            "url": url,
            "info": client.info(),
        });
        return Ok((Arc::new(client), descriptor));
    }
    Err(Failure::usage(format!(
        "backend {spec:?} is neither toy:<fixture> nor gateway:<url>"
    )))
}

fn toy_descriptor(spec: &str, m: &TabularLM) -> Value {
    let v = m.vocab();
    json!({
        "spec": spec,
        "kind": "toy",
        "model_id": v.model_id,
        "vocab_size": v.size,
        "order": m.order(),
        "tokenizer_fingerprint": v.tokenizer_fingerprint,
        "deterministic": m.is_deterministic(),
    })
}

/// Opens the backend, probes it, and refuses nondeterministic backends
/// unless overridden.
pub fn open_backend(args: &BackendArgs) -> CliResult<Backend> {
    if args.parallelism == 0 {
        return Err(Failure::usage("--parallelism must be positive"));
    }
    let (raw, descriptor) = open_raw(args.backend.as_deref(), args.parallelism)?;
    let report = probe_determinism(raw.as_ref(), tokattr_gateway::DEFAULT_PROBE_REPEATS)?;
    if !report.passed && !args.allow_nondeterministic {
        return Err(Failure::new(
            Kind::Nondeterministic,
            anyhow::anyhow!(
                "determinism probe failed ({} distinct results in {} repeats); pass --allow-nondeterministic to run anyway",
                report.distinct_responses,
                report.repeats
            ),
        ));
    }
    let determinism = json!({
        "probe": report,
        "allow_nondeterministic": args.allow_nondeterministic,
        "override_used": !report.passed,
    });
    let scoring: Arc<dyn ScoringBackend> = Arc::new(cached(raw, CACHE_CAPACITY)?);
    Ok(Backend {
        scoring,
        descriptor,
        determinism,
    })
}

/// Parses token IDs separated by whitespace or commas.
pub fn read_token_file(path: &Path) -> CliResult<Vec<TokenId>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read token file {}: {e}", path.display())))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<TokenId>()
                .map_err(|_| Failure::usage(format!("{}: {s:?} is not a token ID", path.display())))
        })
        .collect()
}

pub fn strategy(d: &DecodeArgs) -> Strategy {
    match d.strategy {
        StrategyName::Greedy => Strategy::Greedy,
        StrategyName::TopP => Strategy::TopP { p: d.top_p, seed: d.seed },
    }
}

/// Prompt tokens from text or a token file, plus their provenance.
pub fn read_prompt(
    backend: &dyn ScoringBackend,
    text: Option<&str>,
    file: Option<&Path>,
) -> CliResult<(Vec<TokenId>, Value)> {
    let (tokens, prov) = match (text, file) {
        (Some(t), None) => (backend.tokenize(t)?, json!({ "text": t })),
        (None, Some(f)) => (read_token_file(f)?, json!({ "token_file": f.display().to_string() })),
        _ => return Err(Failure::usage("give exactly one of --prompt or --prompt-tokens")),
    };
    if tokens.is_empty() {
        return Err(Failure::usage("the prompt is empty"));
    }
    backend.vocab().check_tokens(&tokens)?;
    let mut prov = prov;
    prov["tokens"] = json!(tokens);
    Ok((tokens, prov))
}

pub fn build_pair(backend: &dyn ScoringBackend, args: &PairArgs) -> CliResult<(PromptResponsePair, Value)> {
    let (prompt, prompt_prov) = read_prompt(backend, args.prompt.as_deref(), args.prompt_tokens.as_deref())?;
    let (response, response_prov) = match (args.response.as_deref(), args.response_tokens.as_deref()) {
        (Some("generate"), None) => {
            let s = strategy(&args.decode);
            let r = backend.generate(&prompt, &s, args.decode.max_new)?;
            (r, json!({ "source": "generated", "strategy": s, "max_new": args.decode.max_new }))
        }
        (Some(t), None) => (backend.tokenize(t)?, json!({ "source": "text", "text": t })),
        (None, Some(f)) => (
            read_token_file(f)?,
            json!({ "source": "token_file", "token_file": f.display().to_string() }),
        ),
        _ => return Err(Failure::usage("give exactly one of --response or --response-tokens")),
    };
    if response.is_empty() {
        return Err(Failure::usage("the response is empty"));
    }
    let vocab = backend.vocab();
    let p = TokenSequence::new(prompt, Arc::clone(&vocab))?;
    let r = TokenSequence::new(response.clone(), vocab)?;
    let pair = match &args.positions {
        Some(pos) => PromptResponsePair::with_mask(p, r, pos.clone())?,
        None => PromptResponsePair::new(p, r)?,
    };
    let mut response_prov = response_prov;
    response_prov["tokens"] = json!(response);
    if let Ok(d) = backend.detokenize(&response) {
        response_prov["detokenized"] = json!(d.text);
    }
    Ok((
        pair.clone(),
        json!({ "prompt": prompt_prov, "response": response_prov, "mask": pair.mask() }),
    ))
}
