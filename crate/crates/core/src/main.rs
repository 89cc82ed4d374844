use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use assl::experiment::{run_experiment, ExperimentConfig};
use assl::output::{build_analysis, emit, load_config, load_logs, write_analysis, RunLogs};
use assl::{gradcheck, Result};

#[derive(Parser)]
#[command(name = "assl", version, about = "Active semi-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a config (or a previous run's manifest.json).
    Run {
        /// JSON config; omit to use the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute analysis tables from an existing output directory.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default config as JSON.
    PrintConfig,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = match config {
                Some(path) => load_config(&path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            cfg.validate()?;
            let result = run_experiment(&cfg)?;
            let tables = build_analysis(&RunLogs::from_result(&result), &cfg)?;
            emit(&result, &tables, &cfg.out_dir)?;
            let failed: Vec<_> = result.runs.iter().filter(|r| r.error.is_some()).collect();
            for run in &failed {
                log::error!(
                    "seed {} {}: {}",
                    run.seed,
                    run.strategy,
                    run.error.as_deref().unwrap_or_default()
                );
            }
            println!("wrote {}", cfg.out_dir.display());
            if !failed.is_empty() {
                return Err(assl::Error::Training {
                    step: 0,
                    message: format!("{} run(s) failed; partial results kept", failed.len()),
                });
            }
        }
        Command::Analyze { input } => {
            let (cfg, runs) = load_logs(&input)?;
            let tables = build_analysis(&runs, &cfg)?;
            write_analysis(&tables, &input)?;
            if let Some(m) = &tables.pairwise {
                for (name, mean) in m.strategies.iter().zip(m.column_means()) {
                    println!("{name}\t{mean}");
                }
            }
        }
        Command::Gradcheck { instances, seed } => {
            let reports = gradcheck::run(instances, seed)?;
            let mut worst = 0.0f64;
            for r in &reports {
                println!("{:?}\tbatch={}\trel={:e}\tabs={:e}", r.architecture, r.batch_size, r.max_rel_error, r.max_abs_error);
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:e}");
        }
        Command::PrintConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
