//! Golden request/response transcripts recorded against the toy gateway.

mod common;

use std::path::PathBuf;

use tokattr_gateway::conformance::{record_transcript, replay_transcript, TranscriptEntry};
use tokattr_gateway::{GatewayClient, ServerOptions};

use common::*;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_v3_k1_seed7.json")
}

#[test]
fn toy_gateway_matches_golden_transcript() {
    let text = std::fs::read_to_string(golden_path()).unwrap();
    let transcript: Vec<TranscriptEntry> = serde_json::from_str(&text).unwrap();
    let server = serve(toy(), ServerOptions::default());
    let client = GatewayClient::connect(endpoint(&server)).unwrap();
    let checks = replay_transcript(&client, &transcript);
    assert_eq!(checks.len(), 10);
    for c in checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
#[ignore = "rewrites the golden transcript"]
fn regenerate_golden_transcript() {
    let server = serve(toy(), ServerOptions::default());
    let client = GatewayClient::connect(endpoint(&server)).unwrap();
    let t = record_transcript(&client).unwrap();
    std::fs::write(golden_path(), serde_json::to_string_pretty(&t).unwrap() + "\n").unwrap();
}
