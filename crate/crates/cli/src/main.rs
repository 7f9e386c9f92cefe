//! `flexsim` command-line entry point.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 infeasible
//! design space, 4 validation failure. Failures print one JSON error record
//! on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexsim_core::config::{Stage, TilingPolicy};

#[derive(Parser)]
#[command(
    name = "flexsim",
    version,
    about = "Model, explore and verify stage-customized LLM accelerators"
)]
struct Cli {
    /// Directory that relative config paths are resolved against.
    #[arg(long, global = true, env = "FLEXSIM_CONFIG_DIR")]
    config_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage latency, bandwidth and energy from the analytical model.
    Estimate(EstimateArgs),
    /// Search TP/WP/BP for the fastest feasible stage configuration.
    Dse(DseArgs),
    /// Validate or estimate an architecture graph.
    Graph(GraphArgs),
    /// Quantize a tensor and report round-trip error.
    Quantize(QuantizeArgs),
    /// Run the functional toy model (prefill then greedy decode).
    Simulate(SimulateArgs),
    /// Run the HMT plug-in pipeline and its cost model.
    Hmt(HmtArgs),
    /// Compare two reports.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct Output {
    /// Report JSON destination (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub device: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub arch: PathBuf,
    /// Prompt length.
    #[arg(long)]
    pub lp: Option<u64>,
    /// Generated tokens.
    #[arg(long)]
    pub ld: Option<u64>,
    /// Also project a prompt of this length through the HMT plug-in.
    #[arg(long)]
    pub long_context: Option<u64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Ragged)]
    pub policy: PolicyArg,
    /// Breakdown CSV: `stage,quantity,term,value,exact`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StageArg {
    Prefill,
    Decode,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Prefill => Stage::Prefill,
            StageArg::Decode => Stage::Decode,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Ragged,
    Even,
}

impl From<PolicyArg> for TilingPolicy {
    fn from(p: PolicyArg) -> TilingPolicy {
        match p {
            PolicyArg::Ragged => TilingPolicy::Ragged,
            PolicyArg::Even => TilingPolicy::Even,
        }
    }
}

#[derive(Args)]
pub struct DseArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub device: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Candidate sets; the default divisor-based space if omitted.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Resource cost model; the built-in default if omitted.
    #[arg(long)]
    pub cost: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub lp: u64,
    #[arg(long, default_value_t = 1024)]
    pub ld: u64,
    /// Clock for latency and bandwidth; the device clock if omitted.
    #[arg(long)]
    pub freq_hz: Option<u64>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Ragged)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub no_prune: bool,
    /// CSV of every feasible point.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphAction {
    Validate,
    Estimate,
}

#[derive(Args)]
pub struct GraphArgs {
    #[arg(value_enum)]
    pub action: GraphAction,
    /// Graph JSON.
    #[arg(long, conflicts_with = "builtin")]
    pub graph: Option<PathBuf>,
    /// Use a reference graph built from `--arch`.
    #[arg(long, value_enum, requires = "arch")]
    pub builtin: Option<StageArg>,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long)]
    pub device: Option<PathBuf>,
    #[arg(long)]
    pub cost: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub lp: u64,
    #[arg(long, default_value_t = 1024)]
    pub ld: u64,
    #[arg(long)]
    pub freq_hz: Option<u64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SymmetryArg {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    PerTensor,
    PerToken,
    PerChannel,
}

#[derive(Args)]
pub struct QuantizeArgs {
    /// Real tensor file; a seeded random tensor if omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Shape of the random tensor, `ROWSxCOLS`.
    #[arg(long, default_value = "64x64")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[arg(long, value_enum, default_value_t = SymmetryArg::Symmetric)]
    pub symmetry: SymmetryArg,
    #[arg(long, value_enum, default_value_t = GranularityArg::PerChannel)]
    pub granularity: GranularityArg,
    /// Apply an orthonormal Hadamard transform to each row first.
    #[arg(long)]
    pub fht: bool,
    /// Write the quantized tensor here.
    #[arg(long)]
    pub output_tensor: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PathArg {
    Float,
    Float32,
    Quantized,
    Exact,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Weight container; seeded random weights if omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma- or space-separated token ids.
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 8)]
    pub new_tokens: usize,
    #[arg(long, value_enum, default_value_t = PathArg::Float)]
    pub path: PathArg,
    /// Save the (random) weights to this container.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args)]
pub struct HmtArgs {
    /// Backbone model for the functional pipeline.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token-id file; random tokens if omitted.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Number of random segments when no token file is given.
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
    /// Overrides the arch file's segment length for the functional run.
    #[arg(long)]
    pub segment_len: Option<u64>,
    #[arg(long)]
    pub queue_len: Option<u64>,
    #[arg(long, value_enum, default_value_t = PathArg::Float)]
    pub path: PathArg,
    /// Arch file with `prefill` and `hmt` entries for the cost model.
    #[arg(long)]
    pub arch: PathBuf,
    /// Model whose dimensions drive the cost model.
    #[arg(long)]
    pub cost_model: PathBuf,
    /// Long-context projection length.
    #[arg(long, default_value_t = 65_536)]
    pub total_len: u64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Two report files; the speedup column is `a / b`.
    #[arg(long, num_args = 2, value_names = ["A", "B"], required = true)]
    pub compare: Vec<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(dir) = &cli.config_dir {
        std::env::set_var(flexsim_core::config::CONFIG_DIR_ENV, dir);
    }
    let result = match &cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Dse(a) => commands::dse(a),
        Command::Graph(a) => commands::graph(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Hmt(a) => commands::hmt(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code)
        }
    }
}
