//! Command-line driver: training, sharpness reports, oracle verification,
//! timing and the randomized-label experiment.

pub mod commands;
pub mod config;
pub mod exit;
pub mod stats;
pub mod verify;

use std::ffi::OsString;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "minsharp", version, about = "Exact Hessian traces and minimum sharpness for ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a network; writes a checkpoint (--out) and a per-epoch CSV beside it.
    Train,
    /// Minimum sharpness (and normalized sharpness with --with-ns) of a checkpoint.
    Sharpness,
    /// Run every oracle check on small random networks; exit 2 on any failure.
    Verify,
    /// Time the exact trace against the Kronecker oracle.
    Bench,
    /// Randomized-label experiment: gap versus minimum sharpness.
    Experiment,
}

fn init_threads(cfg: &RunConfig) {
    if let Some(n) = cfg.threads {
        // A pool can only be installed once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<()> {
    init_threads(cfg);
    match command {
        Command::Train => {
            let (checkpoint_path, metrics_path) = commands::train_paths(cfg);
            let artifacts = commands::train(cfg)?;
            commands::emit(Some(&checkpoint_path), &artifacts.checkpoint)?;
            commands::emit(Some(&metrics_path), &artifacts.metrics_csv)?;
            println!("{}", serde_json::to_string_pretty(&artifacts.summary)?);
        }
        Command::Sharpness => {
            let report = commands::sharpness(cfg)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            commands::emit(cfg.out.as_deref(), &text)?;
        }
        Command::Verify => {
            let out = commands::verify(cfg)?;
            for (seed, check) in &out.checks {
                println!("seed {seed:<4} {check}");
            }
            if let Some(path) = &cfg.out {
                commands::emit(Some(path), &(serde_json::to_string_pretty(&out)? + "\n"))?;
            }
            let failed = out.checks.iter().filter(|(_, c)| !c.passed).count();
            commands::require(failed == 0, format!("{failed} of {} checks failed", out.checks.len()))?;
        }
        Command::Bench => {
            let out = commands::bench(cfg)?;
            commands::emit(cfg.out.as_deref(), &out.csv)?;
            for pair in out.rows.chunks(2) {
                eprintln!("n = {}: speedup {:.1}x", pair[0].n, pair[0].mean_seconds / pair[1].mean_seconds);
            }
            commands::require(
                out.worst_disagreement <= commands::TRACE_AGREEMENT,
                format!("exact and oracle traces differ by {:.3e}", out.worst_disagreement),
            )?;
        }
        Command::Experiment => {
            let out = commands::experiment(cfg)?;
            commands::emit(cfg.out.as_deref(), &out.csv)?;
            eprint!("{}", out.summary());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.flags.resolve().and_then(|cfg| dispatch(cli.command, &cfg));
    match result {
        Ok(()) => exit::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit::classify(&err)
        }
    }
}
