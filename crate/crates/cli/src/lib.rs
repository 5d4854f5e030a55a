//! Command-line front end: configuration loading and subcommand dispatch for
//! simulation, training, translation and evaluation runs.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{load_config, parse_config, PipelineConfig, CONFIG_COPY_NAME};

#[derive(Debug, Error)]
pub enum CliError {
    /// Help or version text requested by the user.
    #[error("{0}")]
    Help(String),
    #[error("{0}")]
    Usage(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: pct_core::PctError,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Help(_) => 0,
            CliError::Usage(_) | CliError::Config { .. } | CliError::ConfigParse { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "pct", version, about = "Sim-to-real LiDAR point cloud translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-cast labeled scans of a scene along a trajectory.
    Simulate(RunArgs),
    /// Remove rows, drop pixels and add range noise to projected scans.
    Degrade(RunArgs),
    /// Project scans to range images.
    Project(RunArgs),
    /// Train the appearance generator and discriminator.
    TrainAtm(RunArgs),
    /// Train the sparsity generator and discriminator.
    TrainStm(RunArgs),
    /// Translate labeled scans with a trained generator pair.
    Translate(RunArgs),
    /// Confusion matrix and per-class IoU of predicted labels.
    Eval(RunArgs),
    /// Write labeled scans as colored PLY.
    ExportPly(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; defaults apply to every key it leaves unset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Key overrides as `--key value`, e.g. `--beam.rows 32 --paths.output out`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

/// Short forms accepted for path keys.
fn canonical_key(key: &str) -> String {
    if !key.contains('.') && PipelineConfig::keys().any(|k| k == format!("paths.{key}")) {
        return format!("paths.{key}");
    }
    key.replace('-', "_")
}

fn resolve_config(args: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut config_path = args.config.clone();
    let mut seed = args.seed;
    let mut pairs = Vec::new();
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected `--key value`, found `{flag}`")))?;
        let value = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("missing value for `{flag}`")))?;
        match key {
            "config" => config_path = Some(PathBuf::from(value)),
            "seed" => {
                seed = Some(value.parse().map_err(|_| CliError::Config {
                    key: "seed".into(),
                    reason: format!("cannot parse `{value}`"),
                })?)
            }
            _ => pairs.push((canonical_key(key), value.clone())),
        }
    }
    let mut config = match &config_path {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    for (key, value) in &pairs {
        config.set(key, value)?;
    }
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Help(e.render().to_string())
        }
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let (args, command): (&RunArgs, fn(&PipelineConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::Degrade(a) => (a, commands::degrade),
        Command::Project(a) => (a, commands::project_scans),
        Command::TrainAtm(a) => (a, commands::train_atm),
        Command::TrainStm(a) => (a, commands::train_stm),
        Command::Translate(a) => (a, commands::translate),
        Command::Eval(a) => (a, commands::eval),
        Command::ExportPly(a) => (a, commands::export_ply),
        Command::Gradcheck(a) => (a, commands::gradcheck),
    };
    let config = resolve_config(args)?;
    commands::prepare_output(&config)?;
    command(&config)
}

/// Runs the command line and returns the process exit status, printing a
/// diagnostic on failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(argv) {
        Ok(()) => 0,
        Err(CliError::Help(text)) => {
            print!("{text}");
            0
        }
        Err(CliError::Usage(text)) => {
            eprintln!("{}", text.trim_end());
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
