use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smoothkit::error::{Error, Result};
use smoothkit::harness::{self, Overrides};
use smoothkit::param_store::Granularity;
use smoothkit::smoothing::{sample_mask, Method};
use smoothkit::trainers::Task;

#[derive(Parser)]
#[command(name = "smoothkit", version, about = "Teacher smoothing experiments on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config for each of its seeds.
    Run {
        /// JSON experiment config. Without it, task defaults are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task to run when no config is given.
        #[arg(long, default_value = "fixmatch_lite")]
        task: Task,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        granularity: Option<Granularity>,
        /// Output root directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_name: Option<String>,
    },
    /// Run the config's (p, m) grid with STS smoothing.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the smoothing report of a finished run directory as JSON.
    Report {
        /// Directory holding metrics.csv.
        #[arg(long)]
        run: PathBuf,
        /// Paired run to compute MSE ratios against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Print one smoothing mask as hex.
    Mask {
        #[arg(long)]
        slots: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        draw: u64,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            task,
            seed,
            epochs,
            p,
            m,
            method,
            granularity,
            out,
            run_name,
        } => {
            let overrides = Overrides {
                seed,
                epochs,
                p,
                m,
                method,
                granularity,
                output_dir: out,
                run_name,
            };
            let env_seed = harness::env_seed()?;
            let cfg = match config {
                Some(path) => harness::parse_config(&path, &overrides, env_seed)?,
                None => harness::config_from_flags(task, &overrides, env_seed)?,
            };
            for record in harness::run(&cfg)? {
                println!(
                    "seed {} teacher_accuracy {:.4} -> {}",
                    record.seed,
                    record.final_teacher_accuracy,
                    record.dir.display()
                );
            }
        }
        Command::Sweep { config, jobs, out } => {
            let overrides = Overrides {
                output_dir: out,
                ..Default::default()
            };
            let cfg = harness::parse_config(&config, &overrides, harness::env_seed()?)?;
            let outcome = harness::sweep(&cfg, jobs)?;
            for c in &outcome.cells {
                println!(
                    "p={} m={} mean {:.4} std {:.4}",
                    c.p, c.m, c.mean_teacher_accuracy, c.std_teacher_accuracy
                );
            }
            println!("{}", cfg.run_dir().join("sweep.csv").display());
        }
        Command::Report { run, baseline } => {
            let report = harness::report(&run, baseline.as_deref())?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            println!("{text}");
        }
        Command::Mask { slots, p, seed, draw } => {
            println!("{}", sample_mask(slots, p, seed, draw)?.to_hex());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::Divergence { .. }) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
