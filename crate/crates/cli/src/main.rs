use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use revprop_cli::config::{self, THREADS_ENV};
use revprop_cli::probe::PeakModel;
use revprop_cli::{operating_band, probe_max_batch, run_bench, run_verify, summary_table, Overrides, VerifyOptions};
use revprop_core::{DType, EngineKind};

#[derive(Parser)]
#[command(name = "revprop", about = "Reversible transformer training benchmarks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Throughput sweep over engines and batch sizes; writes a CSV.
    Bench {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Correctness suites on a small model; exits nonzero on failure.
    Verify {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
        #[arg(long, hide = true)]
        corrupt_vjp: bool,
    },
    /// Largest power-of-two batch under an activation byte budget.
    Probe {
        config: PathBuf,
        #[arg(long)]
        budget_bytes: u64,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated subset of vanilla, reprop, pareprop.
    #[arg(long)]
    engines: Option<String>,
}

fn load(path: &Path, flags: Flags) -> Result<revprop_cli::BenchConfig> {
    let mut cfg = config::load(path)?;
    let overrides = Overrides {
        seed: flags.seed,
        dtype: flags.dtype,
        out: flags.out,
        threads: flags.threads,
        engines: flags
            .engines
            .map(|s| config::list::<EngineKind>(&s))
            .transpose()
            .map_err(|e| anyhow::anyhow!("--engines: {e}"))?,
    };
    let env = std::env::var(THREADS_ENV).ok();
    cfg.apply(&overrides, env.as_deref())?;
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Bench { config, flags } => {
            let cfg = load(&config, flags)?;
            let out = run_bench(&cfg).context("bench failed")?;
            print!("{}", summary_table(&out));
            println!("wrote {}", cfg.out_path);
        }
        Command::Verify { config, flags, corrupt_vjp } => {
            let cfg = load(&config, flags)?;
            let report = run_verify(&cfg, VerifyOptions { corrupt_vjp })?;
            print!("{report}");
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                eprintln!("{failed} check(s) failed");
                std::process::exit(1);
            }
        }
        Command::Probe { config, budget_bytes, flags } => {
            let cfg = load(&config, flags)?;
            println!("{:<9} {:>10} {:>14} {:>12}", "engine", "max batch", "peak bytes", "band");
            for &engine in &cfg.engines {
                let max = probe_max_batch(&cfg.model, engine, budget_bytes)
                    .with_context(|| format!("probing {engine}"))?;
                let peak = PeakModel::measure(&cfg.model, engine)?.peak_at(max);
                let (lo, hi) = operating_band(max);
                println!("{:<9} {:>10} {:>14} {:>12}", engine.name(), max, peak, format!("{lo}-{hi}"));
            }
        }
    }
    Ok(())
}
