//! `nbf`: train, synthesize, evaluate and render neural brain fields.

mod commands;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nbf_core::NbfError;

#[derive(Parser)]
#[command(name = "nbf", version, about = "Neural brain fields for EEG/MEG recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic recording and its montage from a field spec.
    GenSynthetic(GenArgs),
    /// Train one field per window and write checkpoints.
    Train(TrainArgs),
    /// Predict virtual electrodes from a checkpoint directory.
    Synthesize(SynthArgs),
    /// Score NBF and the interpolation baselines on held-out electrodes.
    Evaluate(EvalArgs),
    /// Render scalp frames from a checkpoint directory.
    Render(RenderArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Field spec JSON, or the preset name `default-bench`.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Montage JSON output; defaults to `<out>.montage.json`.
    #[arg(long)]
    pub montage_out: Option<PathBuf>,
    /// Also write the noise-free recording here.
    #[arg(long)]
    pub clean_out: Option<PathBuf>,
    /// Noise seed; overrides the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Set the noise level for this SNR against the clean signal power.
    #[arg(long)]
    pub snr_db: Option<f64>,
}

#[derive(Args)]
pub struct ConfigArgs {
    /// Training config JSON.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: desk, paper-default or large-batch.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub recording: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated electrode labels excluded from training.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Montage JSON with the virtual electrode positions.
    #[arg(long)]
    pub positions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub recording: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub holdout: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "nbf,ssi,rbf")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Score against this recording (e.g. the noise-free signal) instead.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrameFormat {
    Pgm,
    Csv,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// `t0:t1:step` or a comma-separated list of seconds.
    #[arg(long)]
    pub times: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FrameFormat::Pgm)]
    pub format: FrameFormat,
}

/// A failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn coverage(message: impl Into<String>) -> Self {
        CliError {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<NbfError> for CliError {
    fn from(e: NbfError) -> Self {
        let code = match e.root() {
            NbfError::DegenerateSignal(_)
            | NbfError::SingularMatrix(_)
            | NbfError::NumericOverflow { .. }
            | NbfError::NonFiniteLoss(_)
            | NbfError::TrainingDiverged { .. }
            | NbfError::EmptyAggregate => 3,
            NbfError::MissingCoverage(_) | NbfError::OutOfDomain { .. } => 4,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("NBF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("NBF_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Synthesize(a) => commands::synthesize(&a, &argv),
        Command::Evaluate(a) => commands::evaluate(&a, &argv),
        Command::Render(a) => render::render(&a, &argv),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
