//! Experiment driver: gen-data → train → eval, configured by one TOML file.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{eval_cmd, gen_data, train_cmd, CliError, EvalArgs};
use config::load_config;

#[derive(Parser)]
#[command(name = "mimicd", version, about = "Multi-modal multi-agent imitation experiments")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Override a config field, e.g. --set training.steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (0 = one per core); overrides `workers` in the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert demonstration corpus and windowed dataset.
    GenData,
    /// Train per-agent policies on the generated dataset.
    Train {
        /// "mimic-d", "vanilla", or "bc"; defaults to the config's method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Roll out a trained policy set (or replay held-out experts) and write
    /// collision, EMD, and mode-coverage tables.
    Eval {
        /// "mimic-d", "vanilla", or "bc"; defaults to the config's method.
        #[arg(long)]
        method: Option<String>,
        /// Explicit checkpoint directory (defaults to the config's layout).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Replay held-out expert demonstrations instead of a policy.
        #[arg(long)]
        replay_expert: bool,
    },
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(&cli.config, &cli.set)?;
    let workers = cli.workers.unwrap_or(config.workers);
    if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Validation(format!("worker pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData => gen_data(&config),
        Command::Train { method } => train_cmd(&config, method.as_deref()),
        Command::Eval {
            method,
            checkpoint,
            replay_expert,
        } => eval_cmd(
            &config,
            &EvalArgs {
                method: method.as_deref(),
                checkpoint: checkpoint.clone(),
                replay_expert: *replay_expert,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and exit 0; usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
