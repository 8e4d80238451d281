mod check;
mod config;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};

/// Decentralized SGD and distributionally robust DSGD experiment runner.
#[derive(Parser)]
#[command(name = "drgossip", version, about)]
struct Cli {
    /// Worker threads for per-round device updates (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of a sweep and write metrics plus a summary.
    Run {
        config: PathBuf,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation cadence in rounds (overrides train.eval_every).
        #[arg(long)]
        eval_every: Option<usize>,
        /// Run sweep cells concurrently.
        #[arg(long)]
        parallel_cells: bool,
    },
    /// Run the fast invariant battery.
    Check {
        #[arg(long, hide = true)]
        inject_asymmetric_w: bool,
    },
    /// Print per-device class histograms of the partition.
    DumpPartition {
        config: PathBuf,
        /// Write `partition.csv` into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("DRGOSSIP_SEED") {
        let seed = seed.trim().parse().map_err(|_| ConfigError(format!("DRGOSSIP_SEED is not an integer: {seed}")))?;
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run { config, out, eval_every, parallel_cells } => {
            let mut cfg = load_config(&config)?;
            if let Some(k) = eval_every {
                if k == 0 {
                    return Err(ConfigError("--eval-every must be positive".into()).into());
                }
                cfg.train.eval_every = k;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let dir = cfg.output_dir.clone();
            run::run(&cfg, &dir, parallel_cells)?;
            println!("wrote {}", dir.join("summary.csv").display());
        }
        Command::Check { inject_asymmetric_w } => {
            let reports = check::run_checks(inject_asymmetric_w);
            for r in &reports {
                println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if reports.iter().any(|r| !r.pass) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::DumpPartition { config, out } => {
            let cfg = load_config(&config)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    let file = std::fs::File::create(dir.join("partition.csv"))?;
                    run::dump_partition(&cfg, std::io::BufWriter::new(file))?;
                }
                None => run::dump_partition(&cfg, std::io::stdout().lock())?,
            }
            std::io::stdout().flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.chain().any(|e| e.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
