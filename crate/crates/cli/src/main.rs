use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedade_cli::experiment::render_comparison;
use fedade_cli::{report, run_experiment, validate_config, CliError, CliResult};

#[derive(Parser)]
#[command(name = "fedade", version, about = "Federated post-adaptation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (mode, seed) cell of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild the comparison table from the metrics CSVs in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn read_config(path: &Path) -> CliResult<fedade_cli::ExperimentConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.into(), source: e })?;
    validate_config(&raw)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, workers, out } => {
            let mut config = read_config(&config)?;
            if let Some(out) = out {
                config.output_dir = out;
            }
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let outcome = run_experiment(&config, workers)?;
            for m in &outcome.modes {
                println!(
                    "{:<14} mean_acc {:.4} ± {:.4}  final_acc {:.4}  mean_eta {:.3e}",
                    m.mode.label(),
                    m.mean_accuracy.mean,
                    m.mean_accuracy.std,
                    m.final_accuracy.mean,
                    m.mean_eta.mean
                );
            }
            println!("outputs in {} (config hash {})", outcome.output_dir.display(), outcome.hash);
        }
        Command::Validate { config } => {
            let config = read_config(&config)?;
            println!("{}", config.to_json_pretty());
        }
        Command::Report { input } => {
            let rows = report::report(&input)?;
            print!("{}", render_comparison(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
