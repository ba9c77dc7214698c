//! Command-line front end: one subcommand per experiment kind, plus a
//! config checker.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 invariant violation,
//! 4 numerical failure or I/O problem.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coagkit::harness::{load_config, run, ExperimentKind, HarnessError, Overrides};

#[derive(Parser)]
#[command(
    name = "coagkit",
    version,
    about = "Coagulation dynamics: truncated solver, stochastic coalescent, and scaling studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON; validated against the shipped schema).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed. Also settable via COAGKIT_SEED; this flag
    /// wins over the environment, the environment over the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (default: the config's out_dir, then the current
    /// directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the truncated equations and report conservation diagnostics.
    Solve(RunArgs),
    /// Run the plain stochastic chain and log every merge.
    Simulate(RunArgs),
    /// Run the truncated stochastic chain with its leak tracker.
    Couple(RunArgs),
    /// Run the shared-clock coupled family over nested retained sets.
    Family(RunArgs),
    /// Extract and certify the two parity limits of the dueling-decay ladder.
    Nonuniq(RunArgs),
    /// Population-scaling convergence study (weak-metric distance).
    Converge(RunArgs),
    /// Population-scaling concentration study (total-variation exceedances).
    Concentrate(RunArgs),
    /// Check a config without running it.
    ValidateConfig {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> Result<String, HarnessError> {
    std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))
}

fn env_seed() -> Result<Option<u64>, HarnessError> {
    match std::env::var("COAGKIT_SEED") {
        Ok(v) => v.trim().parse::<u64>().map(Some).map_err(|e| {
            HarnessError::Config(format!(
                "COAGKIT_SEED must be an unsigned 64-bit integer, got {v:?}: {e}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(HarnessError::Config(format!("COAGKIT_SEED: {e}"))),
    }
}

fn execute(cli: &Cli) -> Result<String, HarnessError> {
    let (args, kind) = match &cli.command {
        Command::Solve(a) => (a, ExperimentKind::Solve),
        Command::Simulate(a) => (a, ExperimentKind::Simulate),
        Command::Couple(a) => (a, ExperimentKind::Couple),
        Command::Family(a) => (a, ExperimentKind::Family),
        Command::Nonuniq(a) => (a, ExperimentKind::Nonuniq),
        Command::Converge(a) => (a, ExperimentKind::Converge),
        Command::Concentrate(a) => (a, ExperimentKind::Concentrate),
        Command::ValidateConfig { config } => {
            let cfg = load_config(&read_config(config)?)?;
            return Ok(format!(
                "{}: valid \"{}\" config",
                config.display(),
                cfg.kind.as_str()
            ));
        }
    };
    let text = read_config(&args.config)?;
    let overrides = Overrides {
        seed: args.seed.or(env_seed()?),
        out_dir: args.out.clone(),
        expected_kind: Some(kind),
    };
    let outcome = run(&text, &overrides)?;
    Ok(format!(
        "{}: wrote {} file(s) to {}",
        kind.as_str(),
        outcome.files.len(),
        outcome.out_dir.display()
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
