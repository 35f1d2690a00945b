//! `replica-cutoff <mode> --config <path> [--seed S] [--out DIR]`
//!
//! Exit status: 0 on success, 2 when a run or comparison fails validation,
//! 1 on any other error. `REPLICA_CUTOFF_THREADS` caps the worker pool.

mod compare;
mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::compare::{compare, CompareOptions};
use crate::config::{Mode, RunConfig};
use crate::output::Table;

#[derive(Parser)]
#[command(name = "replica-cutoff", version, about = "Replica master-equation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_path`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Single-copy Lindblad evolution.
    Lindblad(RunArgs),
    /// Stochastic trajectories with bootstrap bands.
    Trajectories(RunArgs),
    /// Replica master equation with the mean-field closure.
    #[command(name = "replica-meanfield")]
    ReplicaMeanField(RunArgs),
    /// Replica master equation with the pure-state ensemble closure.
    ReplicaEnsemble(RunArgs),
    /// Replica master equation closed by lockstep trajectories.
    ReplicaHybrid(RunArgs),
    /// Checks the null-operator catalog and partial-trace tables.
    NullspaceVerify(RunArgs),
    /// Builds and saves a pure-state ensemble.
    EnsembleBuild(RunArgs),
    /// Compares two CSV outputs column by column.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Maximum allowed per-column deviation.
        #[arg(long)]
        tol: Option<f64>,
        /// Required fraction of rows inside 3-sigma bands.
        #[arg(long, default_value_t = 0.95)]
        coverage: f64,
        /// Comma-separated columns; default is every shared column.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long)]
        allow_version_mismatch: bool,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("REPLICA_CUTOFF_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("REPLICA_CUTOFF_THREADS = {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn execute(mode: Mode, args: RunArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = RunConfig::parse(&text, mode)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_path = Some(o);
    }
    let out = cfg.output_path.clone().unwrap_or_else(|| PathBuf::from("."));
    let outcome = run::run(&cfg, &out)?;
    print!("{}", outcome.summary);
    println!("manifest-hash {}", outcome.manifest.hash());
    Ok(!outcome.validation_failed())
}

fn main_inner(cli: Cli) -> Result<bool> {
    configure_threads()?;
    let (mode, args) = match cli.command {
        Command::Lindblad(a) => (Mode::Lindblad, a),
        Command::Trajectories(a) => (Mode::Trajectories, a),
        Command::ReplicaMeanField(a) => (Mode::ReplicaMeanField, a),
        Command::ReplicaEnsemble(a) => (Mode::ReplicaEnsemble, a),
        Command::ReplicaHybrid(a) => (Mode::ReplicaHybrid, a),
        Command::NullspaceVerify(a) => (Mode::NullspaceVerify, a),
        Command::EnsembleBuild(a) => (Mode::EnsembleBuild, a),
        Command::Compare { a, b, tol, coverage, columns, allow_version_mismatch } => {
            let opts = CompareOptions { tol, coverage, columns, allow_version_mismatch };
            let report = compare(&Table::read(&a)?, &Table::read(&b)?, &opts)?;
            print!("{}", report.render());
            return Ok(report.pass());
        }
    };
    execute(mode, args)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
