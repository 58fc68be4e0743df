use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use trispin_core::fitters::{
    fit_flux_noise, fit_ramsey, reconstruct_dispersion, remove_linear_tilt, transition_from_fit, DephasingPoint,
    FitReport,
};
use trispin_core::pulse_sim::{RamseyMetadata, RamseyTrace};

use crate::error::{CliError, CliResult};
use crate::io::{is_json, read_csv, read_json, read_text, OutputDir};
use crate::Format;

#[derive(Debug, Args)]
pub struct FitRamseyArgs {
    /// Trace as JSON (`delays_ns`, `signal`, `metadata`) or as a
    /// `delay_ns,signal` CSV together with `--metadata`.
    pub input: PathBuf,
    /// Metadata JSON for a CSV trace.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// One-sigma uncertainty of the drive frequency.
    #[arg(long, default_value_t = 0.0)]
    pub drive_sigma_mhz: f64,
}

#[derive(Serialize)]
struct RamseyOutput<'a> {
    trace: &'a RamseyMetadata,
    fit: FitReport,
    transition_mhz: f64,
    transition_sigma_mhz: f64,
}

#[derive(Serialize)]
struct ValueRow<'a> {
    parameter: &'a str,
    value: f64,
    sigma: f64,
}

fn load_trace(args: &FitRamseyArgs) -> CliResult<RamseyTrace> {
    if is_json(&args.input) {
        let trace: RamseyTrace = read_json(&args.input)?;
        return RamseyTrace::new(trace.delays_ns, trace.signal, trace.metadata)
            .map_err(|e| CliError::schema(&args.input, e));
    }
    let meta_path = args
        .metadata
        .as_ref()
        .ok_or_else(|| CliError::Schema("a CSV trace needs --metadata".into()))?;
    let metadata: RamseyMetadata = read_json(meta_path)?;
    RamseyTrace::from_csv(&read_text(&args.input)?, metadata).map_err(|e| CliError::schema(&args.input, e))
}

pub fn ramsey(args: &FitRamseyArgs, out: &mut OutputDir) -> CliResult<String> {
    let trace = load_trace(args)?;
    let fit = fit_ramsey(&trace, None).map_err(CliError::domain)?;
    let m = &trace.metadata;
    let (transition, sigma) = transition_from_fit(m.drive_frequency_mhz, args.drive_sigma_mhz, &fit, m.side);
    let report = fit.report();
    let chi2 = report.chi2_reduced;
    match out.format() {
        Format::Json => {
            let body = RamseyOutput { trace: m, fit: report, transition_mhz: transition, transition_sigma_mhz: sigma };
            out.write_json("fit_ramsey.json", &body)?;
        }
        Format::Csv => {
            let mut rows: Vec<ValueRow> = report
                .names
                .iter()
                .map(|n| ValueRow { parameter: n, value: report.params[n], sigma: report.sigmas[n] })
                .collect();
            rows.push(ValueRow { parameter: "transition_mhz", value: transition, sigma });
            out.write_csv("fit_ramsey.csv", &rows)?;
        }
    }
    Ok(format!("transition = {transition:.4} +/- {sigma:.4} MHz (reduced chi2 {chi2:.3})"))
}

#[derive(Debug, Args)]
pub struct FluxNoiseArgs {
    /// CSV or JSON rows of `flux_slope_hz_per_phi0`, `gamma_phi_per_s`.
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct DephasingRow {
    flux_slope_hz_per_phi0: f64,
    gamma_phi_per_s: f64,
}

#[derive(Deserialize)]
struct DephasingFile {
    points: Vec<DephasingRow>,
}

#[derive(Serialize)]
struct FluxNoiseOutput {
    sqrt_amplitude_micro_phi0: f64,
    sqrt_amplitude_sigma_micro_phi0: f64,
    slope: f64,
    slope_sigma: f64,
    n_points: usize,
}

pub fn flux_noise(args: &FluxNoiseArgs, out: &mut OutputDir) -> CliResult<String> {
    let rows: Vec<DephasingRow> = if is_json(&args.input) {
        read_json::<DephasingFile>(&args.input)?.points
    } else {
        read_csv(&args.input)?
    };
    let points = rows
        .iter()
        .map(|r| DephasingPoint::from_linear_slope(r.flux_slope_hz_per_phi0, r.gamma_phi_per_s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::domain)?;
    let fit = fit_flux_noise(&points).map_err(CliError::domain)?;
    let body = FluxNoiseOutput {
        sqrt_amplitude_micro_phi0: fit.sqrt_amplitude_micro_phi0(),
        sqrt_amplitude_sigma_micro_phi0: fit.sqrt_amplitude_sigma_micro_phi0(),
        slope: fit.slope,
        slope_sigma: fit.slope_sigma,
        n_points: fit.n_points,
    };
    match out.format() {
        Format::Json => out.write_json("flux_noise.json", &body)?,
        Format::Csv => out.write_csv("flux_noise.csv", &[&body])?,
    };
    Ok(format!(
        "sqrt(A) = {:.3} +/- {:.3} micro flux quanta from {} points",
        body.sqrt_amplitude_micro_phi0, body.sqrt_amplitude_sigma_micro_phi0, body.n_points
    ))
}

#[derive(Debug, Args)]
pub struct DispersionArgs {
    /// CSV with columns `flux_phi0`, `slope_mhz_per_phi0`.
    pub input: PathBuf,
    /// Subtract the best-fit line, which integration cannot determine.
    #[arg(long)]
    pub remove_tilt: bool,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct SlopeRow {
    flux_phi0: f64,
    slope_mhz_per_phi0: f64,
}

#[derive(Debug, Serialize)]
struct DispersionRow {
    flux_phi0: f64,
    energy_mhz: f64,
}

#[derive(Serialize)]
struct DispersionOutput {
    tilt_removed: bool,
    flux_phi0: Vec<f64>,
    energy_mhz: Vec<f64>,
}

pub fn reconstruct(args: &DispersionArgs, out: &mut OutputDir) -> CliResult<String> {
    let rows: Vec<SlopeRow> = read_csv(&args.input)?;
    let flux: Vec<f64> = rows.iter().map(|r| r.flux_phi0).collect();
    let slopes: Vec<f64> = rows.iter().map(|r| r.slope_mhz_per_phi0).collect();
    let mut energy = reconstruct_dispersion(&flux, &slopes).map_err(CliError::domain)?;
    if args.remove_tilt {
        energy = remove_linear_tilt(&flux, &energy).map_err(CliError::domain)?;
    }
    match out.format() {
        Format::Json => {
            let body = DispersionOutput { tilt_removed: args.remove_tilt, flux_phi0: flux.clone(), energy_mhz: energy.clone() };
            out.write_json("dispersion.json", &body)?;
        }
        Format::Csv => {
            let rows: Vec<DispersionRow> =
                flux.iter().zip(&energy).map(|(&f, &e)| DispersionRow { flux_phi0: f, energy_mhz: e }).collect();
            out.write_csv("dispersion.csv", &rows)?;
        }
    }
    let (lo, hi) = energy.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    Ok(format!("{} points, dispersion spans {:.4} MHz", flux.len(), hi - lo))
}
