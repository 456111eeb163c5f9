//! `mflq`: batch runner for the mean-field LQ solver.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 for
//! invalid input (parse errors, assumption violations, refused oracle), 3 for
//! numerical failures.

mod commands;
mod tolerance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mflq_core::verify::DerivativeMethod;
use serde::Serialize;

use crate::commands::Failure;
use crate::tolerance::Tolerances;

#[derive(Debug, Parser)]
#[command(
    name = "mflq",
    version,
    about = "Decoupled solver for LQ control of mean-field BSDEs with jumps"
)]
#[command(after_help = format!("Tolerance keys:\n{}", Tolerances::help()))]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Problem specification (JSON).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,

    /// Number of uniform time steps.
    #[arg(long, global = true, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    steps: u64,

    /// Ensemble size.
    #[arg(long, global = true, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override a tolerance, KEY=VAL. Repeatable.
    #[arg(long = "tolerance", global = true, value_name = "KEY=VAL")]
    tolerances: Vec<String>,

    /// Use the doubled N1/N2 weights in the adjoint equation.
    #[arg(long, global = true)]
    factor2_variant: bool,

    /// Total degree of the regression basis.
    #[arg(long, global = true, default_value_t = 2)]
    basis_degree: usize,

    /// Weight of the new iterate in the Picard iteration.
    #[arg(long, global = true, default_value_t = 0.5)]
    picard_damping: f64,

    /// Worker threads (defaults to rayon's choice).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write one CSV per process with every particle.
    #[arg(long, global = true)]
    full_ensemble: bool,

    /// Write the generated noise increments to this file.
    #[arg(long, global = true)]
    noise_dump: Option<PathBuf>,

    /// Number of optimality probes and coercivity samples.
    #[arg(long, global = true, default_value_t = 20)]
    probes: usize,

    /// Directional derivative used in the parabola identity.
    #[arg(long, global = true, value_enum, default_value_t = Delta::Adjoint)]
    parabola_delta: Delta,
}

#[derive(Debug, Clone, Copy, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Solve both Riccati equations and report their residuals.
    Riccati,
    /// Run the decoupled pipeline and export every process.
    Solve,
    /// Solve, then probe optimality around the computed control.
    Verify,
    /// Compare the pipeline with the brute-force deterministic oracle.
    OracleCompare,
    /// Compare the pipeline with the damped Picard iteration.
    PicardCompare,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Delta {
    Adjoint,
    Direct,
}

impl From<Delta> for DerivativeMethod {
    fn from(d: Delta) -> Self {
        match d {
            Delta::Adjoint => DerivativeMethod::AdjointRepresentation,
            Delta::Direct => DerivativeMethod::Direct,
        }
    }
}

/// Everything that determines a run. Embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    command: Command,
    spec_path: PathBuf,
    grid_steps: usize,
    particles: usize,
    seed: u64,
    tolerances: Tolerances,
    /// Not serialized so that replays into another directory match.
    #[serde(skip)]
    output_dir: PathBuf,
    factor2_variant: bool,
    basis_degree: usize,
    picard_damping: f64,
    full_ensemble: bool,
    probes: usize,
    parabola_delta: Delta,
    #[serde(skip)]
    noise_dump: Option<PathBuf>,
}

fn config(cli: Cli) -> anyhow::Result<RunConfig> {
    let spec_path = cli.spec.ok_or_else(|| anyhow::anyhow!("--spec is required"))?;
    if !(cli.picard_damping > 0.0 && cli.picard_damping <= 1.0) {
        anyhow::bail!("--picard-damping must lie in (0, 1]");
    }
    Ok(RunConfig {
        command: cli.command,
        spec_path,
        grid_steps: cli.steps as usize,
        particles: cli.particles as usize,
        seed: cli.seed,
        tolerances: Tolerances::with_overrides(&cli.tolerances)?,
        output_dir: cli.out,
        factor2_variant: cli.factor2_variant,
        basis_degree: cli.basis_degree,
        picard_damping: cli.picard_damping,
        full_ensemble: cli.full_ensemble,
        probes: cli.probes,
        parabola_delta: cli.parabola_delta,
        noise_dump: cli.noise_dump,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = config(cli).map_err(Failure::Usage).and_then(|cfg| commands::run(&cfg));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            f.print();
            ExitCode::from(f.exit_code())
        }
    }
}
