//! The "tokattr/1" wire protocol: an HTTP client that implements
//! [`tokattr_core::ScoringBackend`], an in-process server exposing any
//! backend, the determinism probe and the conformance suite.

pub mod client;
pub mod conformance;
pub mod error;
pub mod probe;
pub mod server;
pub mod testing;
pub mod wire;

pub use client::{GatewayClient, GatewayEndpoint, JobScores, RetryPolicy};
pub use error::GatewayError;
pub use probe::{probe_determinism, DeterminismReport, DEFAULT_PROBE_REPEATS};
pub use server::{GatewayServer, Handler, ServerOptions};
pub use wire::PROTOCOL;

/// Environment variable naming the default gateway address.
pub const GATEWAY_ENV: &str = "TOKATTR_GATEWAY";
