//! `adens`: run the tri-plane DenseNet ensemble pipeline from a JSON config.
//!
//! ```text
//! adens <command> --config <path> [--force] [--fold N] [--paper-mode] [--parallel]
//! ```
//!
//! Exit codes: 0 success, 1 a stage failed, 2 the config or arguments are
//! invalid.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use stages::{Context, Outcome, Stage};

/// Overrides the patch cache location.
pub const CACHE_DIR_ENV: &str = "ADENS_CACHE_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    ConfigInvalid(Vec<String>),
    #[error("stage {stage} failed: {source:#}")]
    StageFailed {
        stage: &'static str,
        #[source]
        source: anyhow::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::StageFailed { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "adens", version, about = "Tri-plane DenseNet ensemble for staging Alzheimer's disease from MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true, env = "ADENS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    /// Restrict train, predict and evaluate to one fold.
    #[arg(long, global = true)]
    pub fold: Option<usize>,
    /// Require the three named DenseNets, 5 folds, 70/10/20 splits and hard voting.
    #[arg(long, global = true)]
    pub paper_mode: bool,
    /// Train a fold's models concurrently.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate the synthetic cohort described by data.synthetic.
    Synth,
    /// Cut, normalise and cache tri-plane patches.
    Preprocess,
    /// Build subject-level stratified folds.
    Split,
    /// Train the three models on each fold.
    Train,
    /// Score each fold's test subjects with its trained models.
    Predict,
    /// Vote, aggregate per subject and compute metrics.
    Evaluate,
    /// Render metric tables as text, CSV and JSON.
    Report,
    /// Run every stage in order.
    Pipeline,
}

impl Command {
    pub fn stages(self, synthetic: bool) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::Preprocess => vec![Stage::Preprocess],
            Command::Split => vec![Stage::Split],
            Command::Train => vec![Stage::Train],
            Command::Predict => vec![Stage::Predict],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Report => vec![Stage::Report],
            Command::Pipeline => Stage::ALL.into_iter().filter(|&s| synthetic || s != Stage::Synth).collect(),
        }
    }
}

/// Validate the config and build the stage context.
pub fn prepare(cli: &Cli, command_line: Vec<String>) -> Result<Context, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::ConfigInvalid(vec!["--config <path> is required".into()]))?;
    let config = RunConfig::load(path)?;
    let mut errors = config.validate(cli.paper_mode);
    if matches!(cli.command, Command::Synth) && config.data.synthetic.is_none() {
        errors.push("synth: the config has no data.synthetic section".into());
    }
    if let Some(f) = cli.fold {
        if f >= config.split.k {
            errors.push(format!("--fold {f} is out of range for split.k = {}", config.split.k));
        }
    }
    if !errors.is_empty() {
        return Err(CliError::ConfigInvalid(errors));
    }
    let models = config.resolve_models().map_err(CliError::ConfigInvalid)?;
    let parallel = cli.parallel || config.parallel;
    Ok(Context { config, models, force: cli.force, fold: cli.fold, parallel, command: command_line })
}

/// Run the command's stages in order, stopping at the first failure.
pub fn execute(cli: &Cli, command_line: Vec<String>) -> Result<Vec<(Stage, Outcome)>, CliError> {
    let ctx = prepare(cli, command_line)?;
    let synthetic = ctx.config.data.synthetic.is_some();
    let mut done = Vec::new();
    for stage in cli.command.stages(synthetic) {
        let started = std::time::Instant::now();
        let outcome =
            stages::run_stage(&ctx, stage).map_err(|source| CliError::StageFailed { stage: stage.name(), source })?;
        log::debug!("{} finished in {:.1?}", stage.name(), started.elapsed());
        done.push((stage, outcome));
    }
    Ok(done)
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command_line) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
