//! Experiment orchestration for the gazecloak pipeline.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

use clap::{Parser, Subcommand};
use config::{ExperimentConfig, Overrides};
use error::CliResult;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "gazecloak", version, about = "Adversarial scanpath anonymization pipeline")]
pub struct Cli {
    /// Experiment configuration file (TOML); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iterations: Option<u32>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Full pipeline: train, seed the replay memory, iterate both agents.
    Run,
    /// Differential-privacy epsilon sweep against the trained classifiers.
    Dp,
    /// Train and evaluate the supervised GAN baseline.
    Gan,
    /// Encode a gaze CSV into images (PNG + npy dumps).
    Encode {
        #[arg(long)]
        input: PathBuf,
        /// Encode at most this many records (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Generate a synthetic dataset CSV.
    Synth,
    /// Reuse a trained manipulator on a new dataset, retraining classifiers.
    Transfer {
        /// Source run directory holding the trained models.
        #[arg(long)]
        from: PathBuf,
    },
    /// Rebuild report tables from the iteration streams.
    Report,
    /// Render simple plots from the report tables.
    Plot,
    /// Check that every artifact matches the resolved config hash and seed.
    Verify,
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let overrides = Overrides {
        seed: cli.seed,
        iterations: cli.iterations,
        steps: cli.steps,
        out: cli.out.clone(),
        threads: cli.threads,
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    gazecloak_core::par::set_threads(cfg.threads);
    match &cli.command {
        Command::Run => commands::run::cmd_run(&cfg),
        Command::Dp => commands::dp::cmd_dp(&cfg),
        Command::Gan => commands::misc::cmd_gan(&cfg),
        Command::Encode { input, limit } => commands::misc::cmd_encode(&cfg, input, *limit),
        Command::Synth => commands::misc::cmd_synth(&cfg),
        Command::Transfer { from } => commands::transfer::cmd_transfer(&cfg, from).map(|_| ()),
        Command::Report => commands::misc::cmd_report(&cfg),
        Command::Plot => commands::misc::cmd_plot(&cfg),
        Command::Verify => commands::misc::cmd_verify(&cfg.out),
    }
}

/// Entry point returning the documented exit codes.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version by "erroring" with success.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
