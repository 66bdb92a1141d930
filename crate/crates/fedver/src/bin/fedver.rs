//! Command-line entry point: `fedver run` executes an experiment from a
//! config file; `fedver compare` runs a significance test between two
//! conditions of a finished report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedver::config::load_config;
use fedver::error::FedverError;
use fedver::experiment::{compare_from_dir, run_experiment};

#[derive(Parser)]
#[command(name = "fedver", about = "Federated face-verification training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and write report files.
    Run {
        /// Path to the `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker thread count (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Welch's t-test between two conditions of a finished report.
    Compare {
        /// Report directory written by `fedver run`.
        #[arg(long)]
        report: PathBuf,
        /// First condition name.
        #[arg(long)]
        a: String,
        /// Second condition name.
        #[arg(long)]
        b: String,
    },
}

/// Exit code 1 marks configuration problems, 2 runtime failures.
fn exit_code_for(error: &FedverError) -> ExitCode {
    match error {
        FedverError::Config { .. } | FedverError::Parse { .. } => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn run(cli: Cli) -> Result<(), FedverError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            threads,
        } => {
            if let Some(threads) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global()
                    .map_err(|e| FedverError::invalid(format!("thread pool: {e}")))?;
            }
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out_dir) = out_dir {
                config.output_dir = out_dir;
            }
            let report = run_experiment(&config)?;
            println!(
                "wrote {} condition(s) to {} in {:.1}s",
                report.conditions.len(),
                config.output_dir.display(),
                report.duration_seconds
            );
            for c in &report.conditions {
                println!("  {}: median EER {:.2}%", c.name, c.summary.median);
            }
            Ok(())
        }
        Command::Compare { report, a, b } => {
            let result = compare_from_dir(&report, &a, &b)?;
            println!("{}", serde_json::to_string_pretty(&result).unwrap());
            Ok(())
        }
    }
}
