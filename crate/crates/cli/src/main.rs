//! `trispin`: file-based workflows for estimating and calibrating three
//! coupled flux qubits.
//!
//! Every run writes its outputs plus a `metadata.json` into `--out-dir`.
//! Exit codes: 0 on success, 1 for I/O or malformed input, 2 when the
//! physics or numerics reject the input.

mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::CliResult;
use crate::io::{Metadata, OutputDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "trispin", version, about = "Hamiltonian estimation and calibration for three coupled flux qubits")]
struct Cli {
    /// Root seed; every random draw in the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving the output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Format of the primary output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Suppress the summary printed to stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the seven Hamiltonian parameters from measured transitions.
    Estimate(commands::estimate::EstimateArgs),
    /// Simulate and fit all twelve Ramsey measurements, then invert them.
    EndToEnd(commands::protocol::EndToEndArgs),
    /// Classify every seven-transition subset by invertibility.
    SubsetScan,
    /// Fit a damped cosine to a Ramsey trace.
    FitRamsey(commands::fitting::FitRamseyArgs),
    /// Iteratively calibrate flux crosstalk on a virtual device.
    CalibrateCrosstalk(commands::crosstalk::CalibrateArgs),
    /// Effective three-qubit parameters versus coupler gap.
    CouplingSweep(commands::multimode::SweepArgs),
    /// Flux-noise amplitude from dephasing rates.
    FluxNoise(commands::fitting::FluxNoiseArgs),
    /// Integrate measured flux slopes into a dispersion curve.
    ReconstructDispersion(commands::fitting::DispersionArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::EndToEnd(_) => "end-to-end",
            Command::SubsetScan => "subset-scan",
            Command::FitRamsey(_) => "fit-ramsey",
            Command::CalibrateCrosstalk(_) => "calibrate-crosstalk",
            Command::CouplingSweep(_) => "coupling-sweep",
            Command::FluxNoise(_) => "flux-noise",
            Command::ReconstructDispersion(_) => "reconstruct-dispersion",
        }
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let metadata = Metadata {
        command: cli.command.name(),
        seed: cli.seed,
        format: cli.format,
        version: env!("CARGO_PKG_VERSION"),
    };
    let mut out = OutputDir::create(&cli.out_dir, metadata)?;
    let summary = match &cli.command {
        Command::Estimate(a) => commands::estimate::run(a, &mut out)?,
        Command::EndToEnd(a) => commands::protocol::run(a, &mut out)?,
        Command::SubsetScan => commands::estimate::subset_scan(&mut out)?,
        Command::FitRamsey(a) => commands::fitting::ramsey(a, &mut out)?,
        Command::CalibrateCrosstalk(a) => commands::crosstalk::run(a, &mut out)?,
        Command::CouplingSweep(a) => commands::multimode::run(a, &mut out)?,
        Command::FluxNoise(a) => commands::fitting::flux_noise(a, &mut out)?,
        Command::ReconstructDispersion(a) => commands::fitting::reconstruct(a, &mut out)?,
    };
    let files = out.finish()?;
    Ok(format!("{summary}\nwrote {} to {}", files.join(", "), cli.out_dir.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let quiet = cli.quiet;
    match run(cli) {
        Ok(summary) => {
            if !quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
