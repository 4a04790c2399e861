use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use detrame_harness::config::{ConfigError, RunConfig};
use detrame_harness::{run, verify};

#[derive(Parser)]
#[command(name = "detrame", version, about = "Deep transform and metric learning networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the dictionary, prox-solver and gradient oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network; writes config.txt, metrics.csv and checkpoint.bin.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the `output` key).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Test accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fooling rate of additive Gaussian noise with E‖v‖² = ρ‖x‖², as JSON.
    NoiseSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rhos: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn default_output(config: &Path) -> PathBuf {
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    config
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("{stem}.out"))
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Verify { seed } => {
            let results = verify::run_all(seed)?;
            print!("{}", verify::format_table(&results));
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
        Command::Train { config, output } => {
            let cfg = RunConfig::load(&config)?;
            let out = output
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| default_output(&config));
            let rows = run::train_run(&cfg, &out)?;
            if let Some(last) = rows.last() {
                println!(
                    "trained {} epochs: train_acc {:.4} test_acc {:.4}; outputs in {}",
                    rows.len(),
                    last.train_acc,
                    last.test_acc,
                    out.display()
                );
            }
            Ok(true)
        }
        Command::Eval { checkpoint, config } => {
            let config = config.unwrap_or_else(|| run::sibling_config(&checkpoint));
            let report = run::eval_run(&checkpoint, &config)?;
            println!(
                "accuracy {:.4} samples {} loss {:.6}",
                report.metrics.accuracy, report.samples, report.metrics.loss
            );
            Ok(true)
        }
        Command::NoiseSweep {
            checkpoint,
            rhos,
            seeds,
            config,
            output,
        } => {
            let config = config.unwrap_or_else(|| run::sibling_config(&checkpoint));
            let result = run::noise_run(&checkpoint, &config, &rhos, &seeds)?;
            let json = serde_json::to_string_pretty(&result)?;
            match output {
                Some(path) => std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
