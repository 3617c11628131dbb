mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mocme::checkpoint::CheckpointError;
use mocme::config::ConfigError;
use mocme::eval::EvalMode;
use mocme::kgdata::{DataError, Split};

/// Multimodal knowledge graph completion with complementarity-weighted
/// expert fusion and entropy-guided negative sampling.
#[derive(Parser, Debug)]
#[command(name = "mocme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and print the report as JSON.
    Eval(EvalArgs),
    /// Print the top-k answers of a query.
    Predict(PredictArgs),
    /// Draw negatives and print their difficulty histogram.
    SampleStats(SampleStatsArgs),
    /// Write the entity and relation vocabularies.
    VocabDump(VocabDumpArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Config overrides such as `--max-epochs 0` or `--trainer-seed=3`,
    /// placed after the other options.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value = "filtered")]
    mode: EvalMode,
    /// Worker threads for ranking.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `head,relation,?` or `?,relation,tail`.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct SampleStatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of negatives to draw.
    #[arg(long)]
    n: usize,
    /// Overrides of the checkpoint's sampling settings, e.g. `--delta2 0.6`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct VocabDumpArgs {
    /// Read the data paths from this run configuration...
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// ...or from the configuration stored in this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory receiving entities.tsv and relations.tsv.
    #[arg(long)]
    out: PathBuf,
}

/// Failures mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or arguments: exit 2.
    #[error("{0}")]
    Config(String),
    /// Unreadable or malformed data: exit 3.
    #[error("{0}")]
    Data(String),
    /// Checkpoint written by an unsupported format version: exit 4.
    #[error("{0}")]
    Version(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Version(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match &e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::UnsupportedVersion { .. } => CliError::Version(e.to_string()),
            CheckpointError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.config, &a.overrides),
        Command::Eval(a) => commands::eval(&a.checkpoint, a.split, a.mode, a.threads),
        Command::Predict(a) => commands::predict(&a.checkpoint, &a.query, a.k),
        Command::SampleStats(a) => commands::sample_stats(&a.checkpoint, a.n, &a.overrides),
        Command::VocabDump(a) => commands::vocab_dump(a.config.as_deref(), a.checkpoint.as_deref(), &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
