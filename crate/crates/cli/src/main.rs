use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fleetgp::harness::{self, ExperimentConfig, TargetType};
use fleetgp::{oracle, Error};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fleetgp", version, about = "Fleet-wide GP policy iteration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results, correlations and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the seed of run 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to one target type.
        #[arg(long = "target-type")]
        target_type: Option<TargetType>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Recompute summary.json from results.csv.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run a brute-force validation suite.
    Oracle {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(oracle::SUITES))]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Run {
            config,
            runs,
            seed,
            target_type,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(n) = runs {
                cfg.runs = n;
                cfg.seeds = None;
            }
            if let Some(s) = seed {
                cfg.seed = s;
                cfg.seeds = None;
            }
            if let Some(t) = target_type {
                cfg.target_types = vec![t];
            }
            cfg.validate()?;
            let results = harness::run_experiment(&cfg)?;
            let summary = harness::write_outputs(&out, &cfg, &results)?;
            let failed = results.iter().filter(|r| !r.succeeded()).count();
            if failed == results.len() {
                return Err(Error::Optimization(format!("all {failed} runs failed")));
            }
            Ok(json!({ "out": out, "runs": results.len(), "failed": failed, "summary": summary }))
        }
        Command::Summarize { input } => Ok(serde_json::to_value(harness::summarize_dir(&input)?)?),
        Command::Oracle { suite, seed } => {
            let report = oracle::run_suite(&suite, seed)?;
            let ok = report.passed();
            let value = serde_json::to_value(&report)?;
            if !ok {
                return Err(Error::Optimization(format!("oracle suite '{suite}' failed: {value}")));
            }
            Ok(value)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
