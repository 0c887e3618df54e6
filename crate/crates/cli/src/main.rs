//! `mumoe`: prune, evaluate and benchmark test-time activation-aware pruning.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mumoe", version, about = "Per-prompt activation-aware pruning experiments")]
struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build masks for every linear layer and dump them.
    Prune(PruneArgs),
    /// Perplexity and cost report on a text.
    Eval(EvalArgs),
    /// Time the selection strategies.
    Bench(BenchArgs),
    /// Offline-versus-online losses under domain shift.
    Shift(ShiftArgs),
}

/// Settings shared by every command that prunes.
#[derive(Debug, Args)]
pub struct PruneFlags {
    /// Active-weight ratio in (0, 1].
    #[arg(long)]
    pub rho: Option<f64>,
    /// magnitude | wanda | sparsegpt
    #[arg(long)]
    pub method: Option<String>,
    /// sort | heap | kth
    #[arg(long)]
    pub strategy: Option<String>,
    /// canonical | parity
    #[arg(long)]
    pub tie: Option<String>,
    /// Damping as a fraction of the mean Gram diagonal per token.
    #[arg(long)]
    pub lambda_relative: Option<f64>,
    /// Fixed damping added to the Gram diagonal.
    #[arg(long)]
    pub lambda_absolute: Option<f64>,
    /// Permit SparseGPT scores in online mode.
    #[arg(long)]
    pub allow_online_sparsegpt: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// offline | online
    #[arg(long)]
    pub mode: Option<String>,
    #[command(flatten)]
    pub prune: PruneFlags,
    /// Calibration text (or `.u32` token ids) for offline mode.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Prompt text for online mode.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    /// Prompt file for online mode.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Tokens to measure offline approximation loss on (default: the
    /// calibration tokens).
    #[arg(long)]
    pub loss_on: Option<PathBuf>,
    /// Output directory for mask dumps, summary and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Text (or `.u32` token ids) to score.
    #[arg(long)]
    pub text: PathBuf,
    /// dense | offline | online
    #[arg(long)]
    pub mode: Option<String>,
    #[command(flatten)]
    pub prune: PruneFlags,
    /// Calibration text for offline mode.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Window stride (default: the model's max_seq).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Directory for the cost report, per-window NLL and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated input widths.
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    /// Comma-separated output widths.
    #[arg(long, value_delimiter = ',')]
    pub dprime: Option<Vec<usize>>,
    /// Comma-separated active ratios.
    #[arg(long, value_delimiter = ',')]
    pub rho: Option<Vec<f64>>,
    /// Comma-separated strategies (sort, heap, kth; `-par` suffix for the
    /// row-parallel variant).
    #[arg(long)]
    pub strategies: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also time the row-parallel variant of every strategy.
    #[arg(long)]
    pub parallel: bool,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    /// Run the single-layer synthetic experiment instead of a model.
    #[arg(long, conflicts_with_all = ["model", "domain_a", "domain_b"])]
    pub synthetic: bool,
    #[arg(long, requires_all = ["domain_a", "domain_b"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub domain_a: Option<PathBuf>,
    #[arg(long)]
    pub domain_b: Option<PathBuf>,
    #[command(flatten)]
    pub prune: PruneFlags,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub calib_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<mumoe::Error> for CliError {
    fn from(e: mumoe::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MUMOE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MUMOE_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Run(e.into()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = settings::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prune(a) => commands::prune(&a, &file),
        Command::Eval(a) => commands::eval(&a, &file),
        Command::Bench(a) => commands::bench(&a, &file),
        Command::Shift(a) => commands::shift(&a, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg }));
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("{}", serde_json::json!({ "error": "runtime", "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
