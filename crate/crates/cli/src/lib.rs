//! Command-line runner: one subcommand per experiment, JSON config in,
//! CSV and JSON out.
//!
//! Exit status is 0 on success, 2 when a physics check fails and 1 on a
//! usage, configuration or runtime error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::output::{Check, OutputDir};

/// Environment override for the output directory.
pub const OUT_DIR_ENV: &str = "BELL_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} failed: {message}")]
    Compute { stage: &'static str, message: String },
    #[error("output error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Subcommand)]
pub enum Command {
    /// Sector eigenvalues, checked against the lattice dispersion.
    Spectrum,
    /// Level multiplicities of the staggered and naive lattices.
    Doubling,
    /// Schrödinger evolution of a packet with norm and energy tracking.
    Evolve,
    /// Jump-process trajectories guided by the evolving state.
    Trajectories,
    /// Ensemble histograms against |Ψ|² at checkpoints.
    Equivariance,
    /// Master equation for the configuration distribution.
    MasterEquation,
    /// Jump trajectories against the continuum guidance law.
    ContinuumConvergence,
    /// Factorizability of the two-quantum current.
    Nonlocality,
    /// Smeared density commutator with particle number.
    CommutatorCheck,
    /// Lattice velocity of plane waves.
    VelocityTable,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Doubling => "doubling",
            Command::Evolve => "evolve",
            Command::Trajectories => "trajectories",
            Command::Equivariance => "equivariance",
            Command::MasterEquation => "master-equation",
            Command::ContinuumConvergence => "continuum-convergence",
            Command::Nonlocality => "nonlocality",
            Command::CommutatorCheck => "commutator-check",
            Command::VelocityTable => "velocity-table",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bell", version, about = "Bell-type jump dynamics on a staggered lattice")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (also settable through BELL_OUT_DIR).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for ensembles.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Outcome of a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub checks: Vec<Check>,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn run(cli: &Cli) -> Result<RunSummary, RunError> {
    let started = chrono::Utc::now();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(RunError::Config("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let raw = match &cli.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| raw.experiment.as_ref().map(|e| PathBuf::from("runs").join(e)))
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let cfg = config::resolve(cli.command, raw, cli.seed);
    let mut out = OutputDir::create(&out_dir)?;
    let (checks, metrics) = match cli.command {
        Command::Spectrum => commands::spectrum_cmd(&cfg, &mut out),
        Command::Doubling => commands::doubling_cmd(&cfg, &mut out),
        Command::Evolve => commands::evolve_cmd(&cfg, &mut out),
        Command::Trajectories => commands::trajectories_cmd(&cfg, &mut out),
        Command::Equivariance => commands::equivariance_cmd(&cfg, &mut out),
        Command::MasterEquation => commands::master_equation_cmd(&cfg, &mut out),
        Command::ContinuumConvergence => commands::convergence_cmd(&cfg, &mut out),
        Command::Nonlocality => commands::nonlocality_cmd(&cfg, &mut out),
        Command::CommutatorCheck => commands::commutator_cmd(&cfg, &mut out),
        Command::VelocityTable => commands::velocity_cmd(&cfg, &mut out),
    }?;
    out.finish(cli.command.name(), &cfg, started, &checks, &metrics)?;
    Ok(RunSummary { checks, out_dir })
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            for c in &summary.checks {
                println!("{}: {} (value {:e}, {})", c.name, if c.pass { "PASS" } else { "FAIL" }, c.value, c.threshold);
            }
            println!("outputs in {}", summary.out_dir.display());
            if summary.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
