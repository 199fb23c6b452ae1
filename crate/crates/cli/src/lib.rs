//! Command-line pipeline: synthesize or ingest graphs, pretrain the aligner,
//! select demonstrations, tune the projector and evaluate.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::artifacts::RunDir;
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate the synthetic graph family.
    Synth,
    /// Import graph directories listed in `ingest.paths`.
    Ingest,
    /// Check every stored graph against the structural invariants.
    Validate,
    /// Pretrain the structure-aware aligner.
    Pretrain,
    /// Export node embeddings and linear-probe accuracies.
    Embed,
    /// Select demonstrations for every example.
    Demos,
    /// Train the decoder and tune one projector per prompt mode.
    Tune,
    /// Predict on the test split and write metrics.
    Eval,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Run the full pipeline in every prompt mode and compare.
    Ablate,
}

#[derive(Debug, Parser)]
#[command(
    name = "mmgraph",
    about = "Multimodal graph in-context learning pipeline",
    override_usage = "mmgraph <COMMAND> [--config FILE] [--key value]..."
)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// key = value file applied on top of the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// `--key value` or `--key=value` settings applied last.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

/// Defaults, then the config file, then the overrides.
pub fn resolve(config: Option<&std::path::Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Runs one subcommand against the run directory of `cfg`.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<RunDir> {
    if command == Command::Ablate {
        return stages::ablate(cfg);
    }
    let run = RunDir::create(cfg)?;
    match command {
        Command::Synth => stages::synth(cfg, &run)?,
        Command::Ingest => stages::ingest(cfg, &run)?,
        Command::Validate => stages::validate_graphs(&run)?,
        Command::Pretrain => stages::pretrain(cfg, &run)?,
        Command::Embed => stages::embed(cfg, &run)?,
        Command::Demos => stages::demos(cfg, &run)?,
        Command::Tune => stages::tune(cfg, &run)?,
        Command::Eval => {
            stages::eval(cfg, &run)?;
        }
        Command::Gradcheck => stages::gradcheck(cfg, &run)?,
        Command::Ablate => unreachable!("handled above"),
    }
    Ok(run)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome =
        resolve(cli.config.as_deref(), &cli.overrides).and_then(|cfg| execute(cli.command, &cfg));
    match outcome {
        Ok(run) => {
            println!("run directory: {}", run.root().display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
