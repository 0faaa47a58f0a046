use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use tokattr_core::context::{bucket_means, flag_anomalies, AnomalyKind, AnomalyThresholds};
use tokattr_core::eval::{evaluate, occlusion_baseline, EvalTarget, METRIC_DIRECTION};
use tokattr_core::replacement::{replacement_experiment, select_modal_response, CandidateSource, ReplacementConfig};
use tokattr_core::{attribute_all, AttributionConfig, AttributionRecord, Bucket, ScoringBackend, Strategy, TabularLM};
use tokattr_gateway::testing::Jittered;
use tokattr_gateway::{probe_determinism, GatewayServer, ServerOptions};

use crate::args::*;
use crate::failure::{CliResult, Failure, Kind};
use crate::output::{manifest, num, read_jsonl, table, ManifestParts, OutDir};
use crate::setup::{build_pair, open_backend, open_raw, read_prompt, strategy};

fn attribution_config(tau: f64, parallelism: usize, exclude_special: bool) -> CliResult<AttributionConfig> {
    let mut cfg = AttributionConfig::default().with_top_mass(tau).with_parallelism(parallelism);
    cfg.exclude_special = exclude_special;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    position: usize,
    token_id: u32,
    token_text: &'a str,
    a_mu: f64,
    s_p: f64,
    s_pr: f64,
    kl_mu: f64,
    bucket: &'static str,
    truncation_bound: f64,
    replacement_count: usize,
}

fn bucket_color(b: Bucket) -> &'static str {
    match b {
        Bucket::Negative => "31",
        Bucket::NearZero => "2",
        Bucket::High => "32",
    }
}

pub fn score(args: &ScoreArgs) -> CliResult<()> {
    let backend = open_backend(&args.backend)?;
    let be = backend.scoring.as_ref();
    let (pair, provenance) = build_pair(be, &args.pair)?;
    let cfg = attribution_config(args.tau, args.backend.parallelism, args.exclude_special)?;
    let thresholds = AnomalyThresholds {
        kl: args.kl_threshold,
        entropy_margin: args.entropy_margin,
    };
    let records = attribute_all(be, &pair, &cfg)?;
    let anomalies = flag_anomalies(&records, &thresholds);

    let m = manifest(ManifestParts {
        command: "score",
        backend: backend.descriptor,
        determinism: backend.determinism,
        pair: provenance,
        config: json!({ "attribution": cfg, "anomaly_thresholds": thresholds }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_jsonl("records.jsonl", &m, &records)?;
    out.write_jsonl("anomalies.jsonl", &m, &anomalies)?;
    if args.csv {
        let rows: Vec<CsvRecord> = records
            .iter()
            .map(|r| CsvRecord {
                position: r.position,
                token_id: r.token_id,
                token_text: &r.token_text,
                a_mu: r.a_mu,
                s_p: r.s_p,
                s_pr: r.s_pr,
                kl_mu: r.kl_mu,
                bucket: r.bucket.as_str(),
                truncation_bound: r.truncation_bound,
                replacement_count: r.replacement_count,
            })
            .collect();
        out.write_csv("records.csv", &m, &rows)?;
    }

    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.position.to_string(),
                r.token_text.clone(),
                num(r.a_mu),
                num(r.s_p),
                num(r.s_pr),
                num(r.kl_mu),
                r.bucket.as_str().to_string(),
            ]
        })
        .collect();
    let color = args.color;
    print!(
        "{}",
        table(&["pos", "token", "A_mu", "S_P", "S_PR", "KL", "bucket"], &rows, |i| {
            color.then(|| bucket_color(records[i].bucket))
        })
    );
    let counts: Vec<String> = Bucket::ALL
        .iter()
        .map(|b| format!("{}={}", b.as_str(), records.iter().filter(|r| r.bucket == *b).count()))
        .collect();
    println!(
        "buckets: {} (near-zero band [{}, {}])",
        counts.join(" "),
        cfg.near_zero_band.0,
        cfg.near_zero_band.1
    );
    println!("anomalies: {}", anomalies.len());
    println!("wrote {}", out.path("records.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct FrequencyRow {
    tokens: Vec<u32>,
    text: String,
    count: u64,
}

#[derive(Serialize)]
struct ReplaceRow {
    position: usize,
    token_id: u32,
    token_text: String,
    #[serde(with = "tokattr_core::record::float_repr")]
    a_mu: f64,
    a_mu_source: &'static str,
    candidate_count: usize,
    replacement_entropy: f64,
    original_response_fraction: f64,
    original_in_mass: bool,
    frequencies: Vec<FrequencyRow>,
    candidates: Vec<tokattr_core::replacement::CandidateOutcome>,
}

fn detok(be: &dyn ScoringBackend, tokens: &[u32]) -> String {
    be.detokenize(tokens)
        .map(|d| d.text)
        .unwrap_or_else(|_| format!("{tokens:?}"))
}

pub fn replace(args: &ReplaceArgs) -> CliResult<()> {
    let backend = open_backend(&args.backend)?;
    let be = backend.scoring.as_ref();
    let (pair, provenance) = build_pair(be, &args.pair)?;
    let cfg = ReplacementConfig {
        top_mass: args.tau,
        strategy: strategy(&args.pair.decode),
        samples_per_candidate: args.samples,
        max_new: None,
        source: match args.source {
            SourceName::Prior => CandidateSource::Prior,
            SourceName::Context => CandidateSource::PromptContext,
        },
        parallelism: args.backend.parallelism,
    };
    let (scores, a_source): (BTreeMap<usize, f64>, &'static str) = match &args.scores {
        Some(path) => {
            let (_, recs): (Value, Vec<AttributionRecord>) = read_jsonl(path)?;
            (recs.iter().map(|r| (r.position, r.a_mu)).collect(), "joined")
        }
        None => {
            let cfg = attribution_config(1.0, args.backend.parallelism, false)?;
            let recs = attribute_all(be, &pair, &cfg)?;
            (recs.iter().map(|r| (r.position, r.a_mu)).collect(), "inline")
        }
    };
    let pieces = tokattr_core::attribution::prompt_pieces(be, &pair);
    let mut rows = Vec::new();
    for &pos in pair.mask() {
        let run = replacement_experiment(be, &pair, pos, &cfg)?;
        let a_mu = *scores
            .get(&pos)
            .ok_or_else(|| Failure::usage(format!("score file has no record for position {pos}")))?;
        rows.push(ReplaceRow {
            position: pos,
            token_id: pair.prompt()[pos],
            token_text: pieces[pos].clone(),
            a_mu,
            a_mu_source: a_source,
            candidate_count: run.candidate_count,
            replacement_entropy: run.replacement_entropy,
            original_response_fraction: run.original_response_fraction,
            original_in_mass: run.original_in_mass,
            frequencies: run
                .frequencies
                .iter()
                .map(|f| FrequencyRow {
                    tokens: f.tokens.clone(),
                    text: detok(be, &f.tokens),
                    count: f.count,
                })
                .collect(),
            candidates: run.candidates,
        });
    }
    let m = manifest(ManifestParts {
        command: "replace",
        backend: backend.descriptor,
        determinism: backend.determinism,
        pair: provenance,
        config: json!({ "replacement": cfg, "scores": args.scores.as_ref().map(|p| p.display().to_string()) }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_jsonl("replacement.jsonl", &m, &rows)?;
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.position.to_string(),
                r.token_text.clone(),
                num(r.a_mu),
                r.candidate_count.to_string(),
                num(r.replacement_entropy),
                format!("{:.1}%", 100.0 * r.original_response_fraction),
            ]
        })
        .collect();
    print!(
        "{}",
        table(&["pos", "token", "A_mu", "candidates", "entropy", "original"], &table_rows, |_| None)
    );
    println!("wrote {}", out.path("replacement.jsonl").display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let backend = open_backend(&args.backend)?;
    let be = backend.scoring.as_ref();
    let (pair, provenance) = build_pair(be, &args.pair)?;
    let mut target = EvalTarget::for_backend(be);
    if let Some(b) = args.baseline {
        target.baseline_token = b;
    }
    target.perturb_rate = args.perturb_rate;
    target.perturbation_count = args.perturbations;
    target.k_bins = args.k_bins.clone();
    target.parallelism = args.backend.parallelism;
    target.validate()?;
    let cfg = attribution_config(args.tau, args.backend.parallelism, false)?;
    let scores: Vec<f64> = attribute_all(be, &pair, &cfg)?.iter().map(|r| r.a_mu).collect();
    let occlusion = occlusion_baseline(be, &pair, &target)?;
    let reports = vec![
        evaluate(be, &pair, "attribution_score", &scores, &target)?,
        evaluate(be, &pair, "occlusion", &occlusion, &target)?,
    ];
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("reports serialize");
            v["higher_is_better"] = json!(METRIC_DIRECTION);
            v
        })
        .collect();
    let m = manifest(ManifestParts {
        command: "eval",
        backend: backend.descriptor,
        determinism: backend.determinism,
        pair: provenance,
        config: json!({ "attribution": cfg, "target": target, "higher_is_better": METRIC_DIRECTION }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_jsonl("eval.jsonl", &m, &rows)?;

    let arrow = |hib: bool| if hib { "↑" } else { "↓" };
    let naopc = |r: &tokattr_core::eval::EvalReport| r.deletion.naopc_full_mask.map(num).unwrap_or_else(|| "n/a".into());
    let table_rows = vec![
        vec![
            format!("infidelity {}", arrow(METRIC_DIRECTION.infidelity_higher_is_better)),
            num(reports[0].infidelity),
            num(reports[1].infidelity),
        ],
        vec![
            format!("naopc_full_mask {}", arrow(METRIC_DIRECTION.naopc_higher_is_better)),
            naopc(&reports[0]),
            naopc(&reports[1]),
        ],
        vec![
            format!("comprehensiveness {}", arrow(METRIC_DIRECTION.comprehensiveness_higher_is_better)),
            num(reports[0].comprehensiveness),
            num(reports[1].comprehensiveness),
        ],
        vec![
            format!("sufficiency {}", arrow(METRIC_DIRECTION.sufficiency_higher_is_better)),
            num(reports[0].sufficiency),
            num(reports[1].sufficiency),
        ],
    ];
    print!("{}", table(&["metric", "attribution_score", "occlusion"], &table_rows, |_| None));
    println!("wrote {}", out.path("eval.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct BucketSeries {
    bucket: Bucket,
    positions: Vec<usize>,
    token_text: Vec<String>,
    a_mu: Vec<f64>,
    s_p: Vec<f64>,
    s_pr: Vec<f64>,
    kl_mu: Vec<f64>,
    anomalies: Vec<Vec<AnomalyKind>>,
    mean_s_p: Option<f64>,
}

pub fn plotdata(args: &PlotdataArgs) -> CliResult<()> {
    let (source_manifest, mut records): (Value, Vec<AttributionRecord>) = read_jsonl(&args.scores)?;
    let thresholds = AnomalyThresholds {
        kl: args.kl_threshold,
        entropy_margin: args.entropy_margin,
    };
    let anomalies = flag_anomalies(&records, &thresholds);
    let means = bucket_means(&records);
    records.sort_by(|a, b| a.a_mu.total_cmp(&b.a_mu).then(a.position.cmp(&b.position)));
    let series: Vec<BucketSeries> = Bucket::ALL
        .iter()
        .map(|&b| {
            let rs: Vec<&AttributionRecord> = records.iter().filter(|r| r.bucket == b).collect();
            BucketSeries {
                bucket: b,
                positions: rs.iter().map(|r| r.position).collect(),
                token_text: rs.iter().map(|r| r.token_text.clone()).collect(),
                a_mu: rs.iter().map(|r| r.a_mu).collect(),
                s_p: rs.iter().map(|r| r.s_p).collect(),
                s_pr: rs.iter().map(|r| r.s_pr).collect(),
                kl_mu: rs.iter().map(|r| r.kl_mu).collect(),
                anomalies: rs
                    .iter()
                    .map(|r| anomalies.iter().filter(|a| a.position == r.position).map(|a| a.kind).collect())
                    .collect(),
                mean_s_p: means.iter().find(|(mb, _)| *mb == b).and_then(|(_, m)| *m),
            }
        })
        .collect();
    let m = manifest(ManifestParts {
        command: "plotdata",
        backend: source_manifest.get("backend").cloned().unwrap_or(Value::Null),
        determinism: source_manifest.get("determinism").cloned().unwrap_or(Value::Null),
        pair: source_manifest.get("pair").cloned().unwrap_or(Value::Null),
        config: json!({
            "scores": args.scores.display().to_string(),
            "anomaly_thresholds": thresholds,
            "source_manifest": source_manifest,
        }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_json("plotdata.json", &json!({ "manifest": m, "buckets": series }))?;
    for s in &series {
        println!(
            "{}: {} tokens, mean S_P {}",
            s.bucket.as_str(),
            s.positions.len(),
            s.mean_s_p.map(num).unwrap_or_else(|| "n/a".into())
        );
    }
    println!("wrote {}", out.path("plotdata.json").display());
    Ok(())
}

pub fn modal(args: &ModalArgs) -> CliResult<()> {
    let backend = open_backend(&args.backend)?;
    let be = backend.scoring.as_ref();
    let (prompt, prompt_prov) = read_prompt(be, args.prompt.as_deref(), args.prompt_tokens.as_deref())?;
    let s = Strategy::TopP {
        p: args.top_p,
        seed: args.seed,
    };
    let modal = select_modal_response(be, &prompt, &s, args.samples, args.max_new, args.backend.parallelism)?;
    let text = detok(be, &modal.tokens);
    let m = manifest(ManifestParts {
        command: "modal",
        backend: backend.descriptor,
        determinism: backend.determinism,
        pair: json!({ "prompt": prompt_prov, "response": { "source": "modal", "strategy": s, "modal_samples": args.samples } }),
        config: json!({ "samples": args.samples, "max_new": args.max_new, "strategy": s }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_json("modal.json", &json!({ "manifest": m, "modal": modal, "text": text }))?;
    let ids: Vec<String> = modal.tokens.iter().map(|t| t.to_string()).collect();
    out.write_text("modal_response.tokens", &format!("{}\n", ids.join(" ")))?;
    println!(
        "modal response ({} of {} samples, {} distinct): {}",
        modal.count, modal.samples, modal.distinct, text
    );
    println!("wrote {}", out.path("modal_response.tokens").display());
    Ok(())
}

pub fn probe(args: &ProbeArgs) -> CliResult<()> {
    let (raw, descriptor) = open_raw(args.backend.backend.as_deref(), args.backend.parallelism)?;
    let report = probe_determinism(raw.as_ref(), args.repeats)?;
    let m = manifest(ManifestParts {
        command: "probe",
        backend: descriptor,
        determinism: json!({ "probe": report }),
        pair: Value::Null,
        config: json!({ "repeats": args.repeats }),
    });
    let out = OutDir::create(&args.out.out)?;
    out.write_manifest(&m)?;
    out.write_json("probe.json", &json!({ "manifest": m, "report": report }))?;
    println!(
        "{} ({} distinct results in {} repeats; backend declares deterministic={})",
        if report.passed { "PASS" } else { "FAIL" },
        report.distinct_responses,
        report.repeats,
        report.declared_deterministic
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(Kind::Nondeterministic, anyhow::anyhow!("determinism probe failed")))
    }
}

pub fn serve(args: &ServeArgs) -> CliResult<()> {
    let m = TabularLM::load(&args.fixture)?;
    let backend: Arc<dyn ScoringBackend> = match args.jitter {
        Some(a) => Arc::new(Jittered::new(m, a)),
        None => Arc::new(m),
    };
    let server = GatewayServer::start(backend, &args.addr, ServerOptions::default())?;
    println!("serving {} on {}", tokattr_gateway::PROTOCOL, server.url());
    server.join();
    Ok(())
}
