//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps and oracle verification.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod output;

pub use output::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, refused outputs, unreadable configs.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] shiftseg::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(shiftseg::Error::Config(_) | shiftseg::Error::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "shiftseg", version, about = "Shift-aware point-cloud segmentation training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a train/val split.
    Gen(GenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint over augmentation levels.
    Eval(EvalArgs),
    /// Train a grid of configurations varying one factor.
    Ablate(AblateArgs),
    /// Run the oracle suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's mode: none, eas, eas+scr or full.
    #[arg(long)]
    pub mode: Option<String>,
    /// Continue from the latest checkpoint in OUT.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
    /// Stop after this many epochs of this invocation, as if interrupted.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated augmentation levels.
    #[arg(long, default_value = "none,light,moderate,heavy,excessive")]
    pub levels: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Config the checkpoint was trained with; defaults to the config.json of
    /// the run directory holding the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Augmentation draws per cloud for the SSR curve.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of k, D, t, lambda, prior, distill, curriculum.
    #[arg(long)]
    pub sweep: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// grad, quant, stats, metrics or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Tolerance overrides as JSON.
    #[arg(long)]
    pub tolerances: Option<PathBuf>,
    /// Also write the reports and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

/// What a successful command reports back; `failed` maps to exit code 1.
#[derive(Debug, Default)]
pub struct Outcome {
    pub failed: bool,
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Gen(a) => commands::cmd_gen(&a, argv),
        Command::Train(a) => commands::cmd_train(&a, argv),
        Command::Eval(a) => commands::cmd_eval(&a, argv),
        Command::Ablate(a) => commands::cmd_ablate(&a, argv),
        Command::Verify(a) => commands::cmd_verify(&a, argv),
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli, &argv[1.min(argv.len())..]) {
        Ok(o) => i32::from(o.failed),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
