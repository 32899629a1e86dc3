use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use macvr_core::Strategy;

mod commands;

/// Concept-disentangled text-to-video retrieval on feature banks.
#[derive(Debug, Parser)]
#[command(name = "macvr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the retrieval heads on a bank.
    Train(TrainArgs),
    /// Continue training from a trainer state file.
    Resume(ResumeArgs),
    /// Evaluate a checkpoint and write metrics JSON.
    Eval(EvalArgs),
    /// Train the four tag variants and tabulate their metrics.
    Ablate(AblateArgs),
    /// Write per-sample concept vectors as CSV.
    ExportConcepts(ExportArgs),
    /// Generate a synthetic planted-concept bank.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML or JSON training config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ResumeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct StrategyArgs {
    /// Dual-softmax temperature.
    #[arg(long, default_value_t = macvr_core::inference::DEFAULT_TAU_R)]
    tau_r: f64,
    /// Inverted-softmax temperature.
    #[arg(long, default_value_t = macvr_core::inference::DEFAULT_BETA)]
    beta: f64,
    /// Bank whose captions form the querybank.
    #[arg(long, conflicts_with = "qb_probes")]
    qb_manifest: Option<PathBuf>,
    /// Raw f32le probe similarities, one row per probe, one column per gallery item.
    #[arg(long)]
    qb_probes: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    /// Metrics JSON destination; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy, default_value = "none,qb,dsl")]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    strategy_args: StrategyArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    n_frames: usize,
    #[arg(long, default_value_t = 3)]
    n_variants: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    /// Replace tag streams with independent noise.
    #[arg(long)]
    uninformative_tags: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: macvr_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Resume(a) => commands::resume(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ExportConcepts(a) => commands::export_concepts(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message.replace('\n', " "));
            ExitCode::from(e.exit_code)
        }
    }
}
