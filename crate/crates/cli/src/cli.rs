use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "easyspec", version, about = "Layer-parallel speculative decoding on a toy transformer")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Attention worker threads.
    #[arg(long, global = true, env = "ESPEC_WORKERS")]
    pub workers: Option<usize>,

    /// Output directory for reports and tables.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Seed a base model and truncated drafter and save both.
    Init(ModelArgs),
    /// Generate from one prompt and write its report.
    Generate(GenerateArgs),
    /// Run several algorithms over a prompt corpus and compare them.
    Bench(BenchArgs),
    /// Sweep simulated throughput over layer-parallel sizes and widths.
    Simulate(SimulateArgs),
    /// Measure fuzzy-vs-precise similarity per layer-parallel size.
    Probe(ProbeArgs),
    /// Run the analytic and statistical losslessness checks.
    #[command(name = "check-lossless", alias = "check_lossless")]
    CheckLossless(CheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Saved base model.
    #[arg(long, requires = "draft")]
    pub base: Option<PathBuf>,

    /// Saved drafter.
    #[arg(long, requires = "base")]
    pub draft: Option<PathBuf>,

    /// Seed for freshly initialized models.
    #[arg(long, conflicts_with_all = ["base", "draft"])]
    pub init_seed: Option<u64>,

    /// Layers of a freshly initialized base model.
    #[arg(long)]
    pub base_layers: Option<usize>,

    /// Base layers kept by the truncated drafter.
    #[arg(long)]
    pub keep_layers: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Speculation length.
    #[arg(long)]
    pub n: Option<usize>,

    /// Layer-parallel size.
    #[arg(long)]
    pub lp: Option<usize>,

    /// Explicit layer plan such as 0|1-3|4-6|7.
    #[arg(long)]
    pub plan: Option<String>,

    /// Branching factor per depth, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,

    #[arg(long)]
    pub temperature: Option<f32>,

    #[arg(long)]
    pub max_new_tokens: Option<usize>,

    /// Disable bonus calibration.
    #[arg(long)]
    pub no_calibration: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,

    #[arg(long)]
    pub algorithm: Option<String>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated algorithms (default: all four).
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,

    /// Number of synthetic prompts.
    #[arg(long)]
    pub prompts: Option<usize>,

    /// Text file with one prompt per line, instead of synthetic prompts.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Layer-parallel sizes: a range such as 1..5 or a list such as 1,2,4.
    #[arg(long, default_value = "1..5")]
    pub lp: String,

    /// Tree widths (nodes per level), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,4,8,12")]
    pub widths: Vec<usize>,

    /// Acceptance rate used for every point.
    #[arg(long, conflicts_with = "alpha_csv")]
    pub alpha: Option<f64>,

    /// CSV with `lp_size,alpha` rows; overrides --alpha per size.
    #[arg(long)]
    pub alpha_csv: Option<PathBuf>,

    /// Speculation length.
    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub base_layers: Option<usize>,

    #[arg(long)]
    pub keep_layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Layer-parallel sizes: a range such as 1..4 or a list.
    #[arg(long, default_value = "1..4")]
    pub lp: String,

    /// Text file to probe, instead of the 4 KiB synthetic corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Vocabulary size of the random distributions.
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,

    /// Random distribution pairs for the analytic check.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,

    /// Monte-Carlo samples per tree shape.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}
