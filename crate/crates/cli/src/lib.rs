//! Command-line driver: corpus synthesis, vocabulary fitting, tokenization,
//! training, rollouts and evaluation over one experiment document.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use trajeglish_core::Error;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "trajeglish", version, about = "Tokenized multi-agent traffic modelling")]
pub struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "TRAJEGLISH_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment document (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// `--section.key value` overrides applied after the document.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its train/val split.
    Synth(Common),
    /// Fit a template vocabulary and compare methods.
    FitVocab(Common),
    /// Chain-tokenize both splits and report discretization quality.
    Tokenize(Common),
    /// Train a model.
    Train(Common),
    /// Sample rollouts on the validation split.
    Rollout {
        /// Replay every agent from the log.
        #[arg(long)]
        replay_all: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained model and its rollouts.
    Eval(Common),
    /// Print the resolved experiment document.
    ShowConfig(Common),
}

/// Process exit code for a failure: config, data or numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
                Error::Diverged { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}

fn resolve(common: &Common) -> anyhow::Result<config::RunConfig> {
    let overrides = config::parse_overrides(&common.overrides)?;
    Ok(config::load(common.config.as_deref(), &overrides)?)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()).into());
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(c) => commands::synth(&resolve(&c)?),
        Command::FitVocab(c) => commands::fit_vocab(&resolve(&c)?),
        Command::Tokenize(c) => commands::tokenize(&resolve(&c)?),
        Command::Train(c) => commands::train_model(&resolve(&c)?),
        Command::Rollout { replay_all, common } => {
            let mut cfg = resolve(&common)?;
            if replay_all {
                cfg.rollout.control = config::ControlMode::ReplayAll;
            }
            commands::run_rollouts(&cfg)
        }
        Command::Eval(c) => commands::eval(&resolve(&c)?),
        Command::ShowConfig(c) => {
            print!("{}", resolve(&c)?.to_toml());
            Ok(())
        }
    }
}
