use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use beamre_cli::config::ChannelSource;
use beamre_cli::run::{self, Status};
use beamre_cli::{parse_config, thread_count, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beamre", version, about = "Resource-efficient beam-domain power allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance; writes allocation.txt and metrics.csv.
    Solve(Common),
    /// Run the configured sweep; writes sweep_<kind>.csv.
    Sweep(Common),
    /// Run the oracle suites; writes verify.csv.
    Verify(Common),
    /// Write the configured coupling matrices to omega.txt.
    GenChannel(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to `out` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; BEAMRE_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", c.config.display()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.solver.seed = seed;
    }
    // Relative channel files are looked up next to the config.
    if let ChannelSource::File(path) = &mut cfg.channel {
        if path.is_relative() {
            if let Some(dir) = c.config.parent() {
                *path = dir.join(&*path);
            }
        }
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output.clone());
    let env = std::env::var("BEAMRE_THREADS").ok();
    if let Some(n) = thread_count(c.threads, env.as_deref()).map_err(anyhow::Error::msg)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok((cfg, out))
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Solve(c) => {
            let (cfg, out) = load(c)?;
            let s = run::solve_once(&cfg, &out)?;
            println!(
                "solve: {} (RE {:.6e} bits/J/Hz) -> {}",
                s.status.as_str(),
                s.re,
                out.display()
            );
            Ok(if s.status == Status::Failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Sweep(c) => {
            let (cfg, out) = load(c)?;
            let r = run::run_sweep(&cfg, &out)?;
            println!("sweep: {} rows, {} failed -> {}", r.rows, r.failed, r.csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify(c) => {
            let (cfg, out) = load(c)?;
            let checks = run::verify(&cfg, &out)?;
            for ch in &checks {
                let verdict = if ch.passed() { "pass" } else { "FAIL" };
                println!(
                    "{verdict:4} {:24} gap {:.3e} (bound {:.0e})",
                    ch.property, ch.gap, ch.bound
                );
            }
            Ok(if checks.iter().all(|c| c.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::GenChannel(c) => {
            let (cfg, out) = load(c)?;
            let path = run::gen_channel(&cfg, &out)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
