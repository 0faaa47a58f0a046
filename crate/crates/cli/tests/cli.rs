use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::Value;
use tempfile::TempDir;
use tokattr_core::fixtures::replacement_outcomes;
use tokattr_core::{AttributionRecord, TabularLM};
use tokattr_gateway::{GatewayServer, ServerOptions};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tokattr"));
    c.env_remove("TOKATTR_GATEWAY");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn core_fixture(name: &str) -> String {
    format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn write_fixture(dir: &TempDir, name: &str, m: &TabularLM) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, m.to_fixture_string()).unwrap();
    p
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn score_reproduces_pinned_fixture_values() {
    let dir = TempDir::new().unwrap();
    let backend = format!("toy:{}", core_fixture("v4_k2_seed3.toy"));
    let out = run(&["score", "--backend", &backend, "--prompt", "3 0 2 1", "--response", "2 0", "--out", s(dir.path()), "--csv"]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("buckets: negative=2 near_zero=2 high=0 (near-zero band [-0.1, 0.1])"), "{stdout}");
    let l = lines(&dir.path().join("records.jsonl"));
    assert!(l[0]["manifest"]["timestamp"].is_string());
    assert_eq!(l[0]["manifest"]["pair"]["prompt"]["tokens"], serde_json::json!([3, 0, 2, 1]));
    let recs: Vec<AttributionRecord> = l[1..].iter().map(|v| serde_json::from_value(v.clone()).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    assert!((recs[2].a_mu - (-0.14761887387695317556)).abs() < 1e-12);
    assert!((recs[3].a_mu - (-0.82262568813867277377)).abs() < 1e-12);
    assert!((recs[3].kl_mu - 0.46649015301580226449).abs() < 1e-12);
    assert_eq!(recs[3].token_text, "1");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, l[0]["manifest"]);
    let csv = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert!(csv.starts_with("# {"));
    assert_eq!(csv.lines().count(), 6);
    assert!(lines(&dir.path().join("anomalies.jsonl"))[0].get("manifest").is_some());
}

#[test]
fn generated_response_is_recorded() {
    let dir = TempDir::new().unwrap();
    let backend = format!("toy:{}", core_fixture("v3_k1_seed7.toy"));
    let out = run(&[
        "score", "--backend", &backend, "--prompt", "0 1", "--response", "generate", "--strategy", "greedy", "--max-new", "3",
        "--out", s(dir.path()),
    ]);
    ok(&out);
    let m = &lines(&dir.path().join("records.jsonl"))[0]["manifest"];
    assert_eq!(m["pair"]["response"]["source"], "generated");
    assert_eq!(m["pair"]["response"]["tokens"].as_array().unwrap().len(), 3);
    assert_eq!(m["pair"]["response"]["strategy"]["strategy"], "greedy");
}

#[test]
fn token_files_and_position_masks() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("p.tokens");
    let r = dir.path().join("r.tokens");
    std::fs::write(&p, "3, 0\n2 1\n").unwrap();
    std::fs::write(&r, "2 0").unwrap();
    let backend = format!("toy:{}", core_fixture("v4_k2_seed3.toy"));
    let out = run(&[
        "score", "--backend", &backend, "--prompt-tokens", s(&p), "--response-tokens", s(&r), "--positions", "1,3", "--out",
        s(dir.path()),
    ]);
    ok(&out);
    let l = lines(&dir.path().join("records.jsonl"));
    let positions: Vec<u64> = l[1..].iter().map(|v| v["position"].as_u64().unwrap()).collect();
    assert_eq!(positions, vec![1, 3]);
}

#[test]
fn replace_three_outcome_fixture() {
    let dir = TempDir::new().unwrap();
    let fixture = write_fixture(&dir, "three.toy", &replacement_outcomes(3).unwrap());
    let backend = format!("toy:{}", s(&fixture));
    let out = run(&["replace", "--backend", &backend, "--prompt", "0", "--response", "3 0", "--out", s(dir.path())]);
    ok(&out);
    let l = lines(&dir.path().join("replacement.jsonl"));
    assert_eq!(l.len(), 2);
    let row = &l[1];
    assert_eq!(row["candidate_count"], 3);
    assert_eq!(row["replacement_entropy"].as_f64().unwrap(), 3f64.ln());
    assert_eq!(row["original_response_fraction"].as_f64().unwrap(), 1.0 / 3.0);
    assert_eq!(row["a_mu_source"], "inline");
    assert!(row["a_mu"].is_number());
}

#[test]
fn replace_joins_scores_and_single_outcome() {
    let dir = TempDir::new().unwrap();
    let fixture = write_fixture(&dir, "one.toy", &replacement_outcomes(1).unwrap());
    let backend = format!("toy:{}", s(&fixture));
    let scores = dir.path().join("scores");
    ok(&run(&["score", "--backend", &backend, "--prompt", "0", "--response", "3 3", "--out", s(&scores)]));
    let out = run(&[
        "replace", "--backend", &backend, "--prompt", "0", "--response", "3 3", "--scores",
        s(&scores.join("records.jsonl")), "--out", s(dir.path()),
    ]);
    ok(&out);
    let l = lines(&dir.path().join("replacement.jsonl"));
    let score_line = &lines(&scores.join("records.jsonl"))[1];
    assert_eq!(l[1]["a_mu_source"], "joined");
    assert_eq!(l[1]["a_mu"], score_line["a_mu"]);
    assert_eq!(l[1]["replacement_entropy"].as_f64().unwrap(), 0.0);
    assert_eq!(l[1]["original_response_fraction"].as_f64().unwrap(), 1.0);
}

#[test]
fn eval_reports_both_methods_with_directions() {
    let dir = TempDir::new().unwrap();
    let (m, _, _) = tokattr_core::fixtures::eval_fixture().unwrap();
    let fixture = write_fixture(&dir, "eval.toy", &m);
    let backend = format!("toy:{}", s(&fixture));
    let out = run(&[
        "eval", "--backend", &backend, "--prompt", "3 1 2 3", "--response", "2 1", "--perturbations", "32", "--k-bins", "0.25,0.5,1.0",
        "--out", s(dir.path()),
    ]);
    ok(&out);
    let l = lines(&dir.path().join("eval.jsonl"));
    let methods: Vec<&str> = l[1..].iter().map(|v| v["method"].as_str().unwrap()).collect();
    assert_eq!(methods, vec!["attribution_score", "occlusion"]);
    for row in &l[1..] {
        for key in ["infidelity", "comprehensiveness", "sufficiency"] {
            assert!(row[key].is_number(), "{key}");
        }
        assert_eq!(row["higher_is_better"]["sufficiency_higher_is_better"], false);
        assert_eq!(row["higher_is_better"]["comprehensiveness_higher_is_better"], true);
        // the 1.0 bin keeps every token
        assert_eq!(row["deletion"]["steps"][2]["k"], 4);
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("sufficiency ↓"));
}

#[test]
fn plotdata_buckets_and_means() {
    let dir = TempDir::new().unwrap();
    let m = TabularLM::random_tabular(6, 1, 19).unwrap();
    let fixture = write_fixture(&dir, "m.toy", &m);
    let backend = format!("toy:{}", s(&fixture));
    let scores = dir.path().join("scores");
    ok(&run(&["score", "--backend", &backend, "--prompt", "5 1 0 3 2 4", "--response", "1 1", "--out", s(&scores)]));
    let out = run(&["plotdata", "--scores", s(&scores.join("records.jsonl")), "--kl-threshold", "0.0", "--out", s(dir.path())]);
    ok(&out);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("plotdata.json")).unwrap()).unwrap();
    let buckets = v["buckets"].as_array().unwrap();
    let names: Vec<&str> = buckets.iter().map(|b| b["bucket"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["negative", "near_zero", "high"]);
    let mut total = 0;
    for b in buckets {
        let sp: Vec<f64> = b["s_p"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let a: Vec<f64> = b["a_mu"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        total += sp.len();
        if sp.is_empty() {
            assert!(b["mean_s_p"].is_null());
        } else {
            let mean = sp.iter().sum::<f64>() / sp.len() as f64;
            assert!((b["mean_s_p"].as_f64().unwrap() - mean).abs() < 1e-12);
        }
        assert_eq!(b["anomalies"].as_array().unwrap().len(), sp.len());
    }
    assert_eq!(total, 6);
    // with a zero KL threshold every diverging near-zero token is flagged
    let near = &buckets[1];
    let flagged = near["anomalies"].as_array().unwrap().iter().any(|a| !a.as_array().unwrap().is_empty());
    let any_kl = near["kl_mu"].as_array().unwrap().iter().any(|k| k.as_f64().unwrap() > 0.0);
    assert_eq!(flagged, any_kl);
    assert_eq!(v["manifest"]["command"], "plotdata");
}

#[test]
fn plotdata_without_scores_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["plotdata", "--scores", s(&dir.path().join("missing.jsonl")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn modal_writes_replayable_tokens() {
    let dir = TempDir::new().unwrap();
    let backend = format!("toy:{}", core_fixture("v3_k1_seed7.toy"));
    let out = run(&["modal", "--backend", &backend, "--prompt", "0 1", "--samples", "40", "--max-new", "2", "--out", s(dir.path())]);
    ok(&out);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("modal.json")).unwrap()).unwrap();
    assert_eq!(v["modal"]["samples"], 40);
    assert_eq!(v["manifest"]["pair"]["response"]["modal_samples"], 40);
    let tokens = dir.path().join("modal_response.tokens");
    let scores = dir.path().join("scores");
    ok(&run(&["score", "--backend", &backend, "--prompt", "0 1", "--response-tokens", s(&tokens), "--out", s(&scores)]));
}

#[test]
fn probe_and_determinism_gate() {
    let dir = TempDir::new().unwrap();
    let fixture = core_fixture("v3_k1_seed7.toy");
    let out = run(&["probe", "--backend", &format!("toy:{fixture}"), "--out", s(dir.path())]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
    let jitter = format!("toy-jitter:{fixture}");
    let out = run(&["probe", "--backend", &jitter, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let args = ["score", "--backend", &jitter, "--prompt", "0 1", "--response", "2", "--out", s(dir.path())];
    assert_eq!(run(&args).status.code(), Some(3));
    let mut with_override = args.to_vec();
    with_override.push("--allow-nondeterministic");
    ok(&run(&with_override));
    let m = &lines(&dir.path().join("records.jsonl"))[0]["manifest"];
    assert_eq!(m["determinism"]["override_used"], true);
    assert_eq!(m["determinism"]["probe"]["passed"], false);
}

#[test]
fn gateway_backend_matches_toy_backend() {
    let dir = TempDir::new().unwrap();
    let fixture = core_fixture("v4_k2_seed3.toy");
    let model = TabularLM::load(Path::new(&fixture)).unwrap();
    let server = GatewayServer::start(Arc::new(model), "127.0.0.1:0", ServerOptions::default()).unwrap();
    let via_gateway = dir.path().join("gw");
    let out = bin()
        .env("TOKATTR_GATEWAY", server.url())
        .args(["score", "--prompt", "3 0 2 1", "--response", "2 0", "--tau", "0.9", "--parallelism", "4", "--out"])
        .arg(&via_gateway)
        .output()
        .unwrap();
    ok(&out);
    let direct = dir.path().join("toy");
    ok(&run(&[
        "score", "--backend", &format!("toy:{fixture}"), "--prompt", "3 0 2 1", "--response", "2 0", "--tau", "0.9", "--out",
        s(&direct),
    ]));
    let a = lines(&via_gateway.join("records.jsonl"));
    let b = lines(&direct.join("records.jsonl"));
    assert_eq!(a[1..], b[1..]);
    assert_eq!(a[0]["manifest"]["backend"]["kind"], "gateway");
    assert_eq!(a[0]["manifest"]["backend"]["info"]["protocol"], "tokattr/1");
}

#[test]
fn exit_codes_by_failure_kind() {
    let dir = TempDir::new().unwrap();
    // usage: bad flag, missing backend, out-of-vocabulary token
    assert_eq!(run(&["score", "--nope"]).status.code(), Some(1));
    assert_eq!(run(&["score", "--prompt", "1", "--response", "2"]).status.code(), Some(1));
    let backend = format!("toy:{}", core_fixture("v3_k1_seed7.toy"));
    assert_eq!(
        run(&["score", "--backend", &backend, "--prompt", "7", "--response", "1", "--out", s(dir.path())]).status.code(),
        Some(1)
    );
    // transport: nothing listening
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let gw = format!("gateway:http://127.0.0.1:{port}");
    assert_eq!(
        run(&["score", "--backend", &gw, "--prompt", "1", "--response", "2", "--out", s(dir.path())]).status.code(),
        Some(2)
    );
    assert!(run(&["--help"]).status.success());
}
