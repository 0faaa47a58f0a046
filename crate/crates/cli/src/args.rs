use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tokattr", version, about = "Token attribution scores for prompt/response pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attribution scores, contextual entropies and anomaly flags per prompt token.
    Score(ScoreArgs),
    /// Replacement experiment: regenerate the response with each likely prompt token swapped in.
    Replace(ReplaceArgs),
    /// Faithfulness metrics for the attribution scores and an occlusion baseline.
    Eval(EvalArgs),
    /// Bucketed arrays for plotting, from a score run.
    Plotdata(PlotdataArgs),
    /// Most frequent sampled response for a prompt.
    Modal(ModalArgs),
    /// Check that the backend scores repeatably.
    Probe(ProbeArgs),
    /// Serve a toy model over the gateway protocol.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// `toy:<fixture path>` or `gateway:<url>`; defaults to the TOKATTR_GATEWAY endpoint.
    #[arg(long)]
    pub backend: Option<String>,
    /// Concurrent backend requests.
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// Run even if the determinism probe fails (recorded in every output).
    #[arg(long)]
    pub allow_nondeterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyName {
    Greedy,
    TopP,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Decoding strategy for generated responses.
    #[arg(long, value_enum, default_value = "greedy")]
    pub strategy: StrategyName,
    /// Nucleus mass for `top-p` decoding.
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tokens to generate.
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    /// Prompt text, tokenized by the backend.
    #[arg(long, conflicts_with = "prompt_tokens")]
    pub prompt: Option<String>,
    /// File of prompt token IDs (whitespace or comma separated).
    #[arg(long)]
    pub prompt_tokens: Option<PathBuf>,
    /// Response text, or `generate` to decode one from the prompt.
    #[arg(long, conflicts_with = "response_tokens")]
    pub response: Option<String>,
    /// File of response token IDs.
    #[arg(long)]
    pub response_tokens: Option<PathBuf>,
    /// Attributed prompt positions, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub positions: Option<Vec<usize>>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = "tokattr-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Sum replacements over the top tokens reaching this prior mass.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Leave special tokens out of the replacement sums.
    #[arg(long)]
    pub exclude_special: bool,
    /// KL threshold (nats) for anomaly flags.
    #[arg(long, default_value_t = 1.0)]
    pub kl_threshold: f64,
    /// Entropy margin (nats) for anomaly flags.
    #[arg(long, default_value_t = 0.1)]
    pub entropy_margin: f64,
    /// Also write records.csv.
    #[arg(long)]
    pub csv: bool,
    /// Color table rows by bucket.
    #[arg(long)]
    pub color: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceName {
    Prior,
    Context,
}

#[derive(Debug, Args)]
pub struct ReplaceArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Candidate tokens cover this much of the candidate distribution.
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// Samples per candidate for `top-p` decoding.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Candidate distribution: next-token prior or prompt-context distribution.
    #[arg(long, value_enum, default_value = "prior")]
    pub source: SourceName,
    /// records.jsonl of an earlier score run to join scores from.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Token replacing removed positions (default: the backend's padding token, else 0).
    #[arg(long)]
    pub baseline: Option<u32>,
    #[arg(long, default_value_t = 0.2)]
    pub perturb_rate: f64,
    #[arg(long, default_value_t = 128)]
    pub perturbations: usize,
    /// Top-k fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.2, 0.5])]
    pub k_bins: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct PlotdataArgs {
    /// records.jsonl written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 1.0)]
    pub kl_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    pub entropy_margin: f64,
}

#[derive(Debug, Args)]
pub struct ModalArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, conflicts_with = "prompt_tokens")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_tokens: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = tokattr_gateway::DEFAULT_PROBE_REPEATS)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Toy model fixture file.
    #[arg(long)]
    pub fixture: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Add this much noise to every log-probability (for testing the probe).
    #[arg(long)]
    pub jitter: Option<f64>,
}
