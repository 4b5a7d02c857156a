//! Scenario runner: solve a configured storage/market case and write its
//! plot-ready CSV tables and reports.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 solver
//! non-convergence (a residual history file is written first), 1 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridstore::scenario::{run, Command, RunError, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "gridstore",
    version,
    about = "Storage dispatch, investment and hedging scenario runner",
    after_help = "Scenario files are flat `key = value` text; see configs/ for examples."
)]
struct Cli {
    /// Scenario file to run.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Directory artifacts are written into (created if missing).
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the fixed-point convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,

    /// Override the fixed-point iteration budget.
    #[arg(long)]
    max_iter: Option<usize>,

    /// Print only errors.
    #[arg(long)]
    quiet: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Solve the policy and emit the per-state price table and policy table.
    Solve,
    /// Stationary storage-level distribution.
    Stationary,
    /// Stationary price-duration curve.
    PdCurve,
    /// Marginal benefit of storage capacity across the configured sweep.
    MarginalBenefit,
    /// Break-even storage capacity for the configured fixed cost.
    OptimalCapacity,
    /// Simulate a path and settle the replicating hedge against it.
    HedgeDemo,
    /// Simulate a trajectory and write it with a summary.
    Simulate,
}

impl From<Cmd> for Command {
    fn from(cmd: Cmd) -> Self {
        match cmd {
            Cmd::Solve => Command::Solve,
            Cmd::Stationary => Command::Stationary,
            Cmd::PdCurve => Command::PdCurve,
            Cmd::MarginalBenefit => Command::MarginalBenefit,
            Cmd::OptimalCapacity => Command::OptimalCapacity,
            Cmd::HedgeDemo => Command::HedgeDemo,
            Cmd::Simulate => Command::Simulate,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    let mut config = ScenarioConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(tol) = cli.tol {
        if !(tol > 0.0) {
            return Err(RunError::Config(format!(
                "--tol must be positive, got {tol}"
            )));
        }
        config.solve.tol = tol;
    }
    if let Some(max_iter) = cli.max_iter {
        config.solve.max_iter = max_iter;
    }
    let out = run(cli.command.into(), &config, &cli.out)?;
    if !cli.quiet {
        for note in &out.notes {
            println!("{note}");
        }
        for file in &out.files {
            println!("wrote {}", file.display());
        }
    }
    Ok(())
}
