//! `kolmo`: runs the solvers, derivative assembly and experiments from the
//! command line, writing CSV artifacts and a manifest into `--out`.
//!
//! Exit status: 0 when every check passes, 1 when a check fails or a solver
//! aborts, 2 on usage or configuration errors.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kolmo", version, about = "Nonlinear Fokker–Planck flows and their measure derivatives")]
pub struct Cli {
    /// `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for CSV artifacts and the manifest.
    #[arg(long, global = true, default_value = "kolmo-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

/// Problem description shared by the PDE subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct Problem {
    /// Model definition file (`model = kuramoto|aggregation|convolution`).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Kuramoto coupling when no model file is given.
    #[arg(long = "K")]
    pub coupling: Option<f64>,
    /// Grid size.
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Initial density as `x,value` CSV.
    #[arg(long)]
    pub mu0: Option<PathBuf>,
    /// Test function `g` of the linear functional `∫g dμ`, as `x,value` CSV.
    #[arg(long)]
    pub phi: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Integrates the nonlinear forward equation.
    Forward(Problem),
    /// Solves the backward equation with terminal data `phi` and reports `v(0)`.
    Backward(Problem),
    /// Assembles the k-th linear functional derivative kernel.
    Derivative {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        k: Option<usize>,
        /// Lattice stride of the kernel's z slots.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Remainder sweep of the order-k expansion along `(1−ε)μ + εμ̂`.
    VerifyExpansion {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated ε list.
        #[arg(long)]
        eps: Option<String>,
        /// Second density `μ̂` as `x,value` CSV.
        #[arg(long)]
        mu_hat: Option<PathBuf>,
    },
    /// Compares `∫ξ dm(t,μ)` with `∫v(0,·) dμ`.
    DualityCheck(Problem),
    /// Particle weak-error study against the mean-field limit.
    Chaos {
        #[command(flatten)]
        problem: Problem,
        /// Comma-separated particle counts.
        #[arg(long = "Ns")]
        ns: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prints the index vectors λ_k (tau) or Λ_k (delta).
    Multiindex {
        #[arg(long, value_enum)]
        class: Option<IndexClass>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Runs the acceptance suite.
    Accept {
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated criteria to run (default: all).
        #[arg(long)]
        only: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexClass {
    Tau,
    Delta,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(run::Failure::Usage(msg)) => {
            eprintln!("kolmo: {msg}");
            ExitCode::from(2)
        }
        Err(run::Failure::Solver(msg)) => {
            eprintln!("kolmo: {msg}");
            ExitCode::from(1)
        }
    }
}
