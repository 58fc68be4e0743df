use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use trispin_core::estimator::{
    scan_subsets, selection_scan, solve_exact, solve_least_squares, EstimationMethod, EstimationResult,
    FrequencyMeasurement, MeasurementRecord, Residual,
};
use trispin_core::spin_model::{HamiltonianParams, N_PARAMS};

use super::{format_params, param_rows, params_of};
use crate::error::{CliError, CliResult};
use crate::io::{read_json, OutputDir};
use crate::Format;

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// JSON file: `{"measurements": [...]}` or a bare array of
    /// `{lower, upper, value_mhz|value_ghz, sigma_mhz|sigma_ghz}`.
    pub input: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MeasurementsFile {
    Wrapped { measurements: Vec<MeasurementRecord> },
    Bare(Vec<MeasurementRecord>),
}

pub fn load_measurements(path: &PathBuf) -> CliResult<Vec<FrequencyMeasurement>> {
    let records = match read_json::<MeasurementsFile>(path)? {
        MeasurementsFile::Wrapped { measurements } | MeasurementsFile::Bare(measurements) => measurements,
    };
    records
        .iter()
        .map(|r| r.to_measurement().map_err(|e| CliError::schema(path, e)))
        .collect()
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    method: EstimationMethod,
    n_measurements: usize,
    params_mhz: HamiltonianParams,
    sigmas_mhz: HamiltonianParams,
    covariance_mhz2: Vec<Vec<f64>>,
    condition_number: f64,
    residuals: &'a [Residual],
    #[serde(skip_serializing_if = "Option::is_none")]
    selection_error_mhz: Option<HamiltonianParams>,
}

#[derive(Serialize)]
struct EstimateRow {
    parameter: &'static str,
    value_mhz: f64,
    sigma_mhz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection_error_mhz: Option<f64>,
}

pub fn estimate(measurements: &[FrequencyMeasurement]) -> CliResult<EstimationResult> {
    let result = if measurements.len() == N_PARAMS {
        solve_exact(measurements)
    } else {
        solve_least_squares(measurements)
    };
    result.map_err(CliError::domain)
}

pub fn run(args: &EstimateArgs, out: &mut OutputDir) -> CliResult<String> {
    let measurements = load_measurements(&args.input)?;
    let result = estimate(&measurements)?;
    let selection = if measurements.len() == 12 {
        let scan = selection_scan(&measurements).map_err(CliError::domain)?;
        out.write_text("selection_subsets.csv", &scan.to_csv())?;
        Some(scan.std_dev)
    } else {
        None
    };
    let values = result.params.to_array();
    let sigmas = result.sigmas();
    match out.format() {
        Format::Json => {
            let body = EstimateOutput {
                method: result.method,
                n_measurements: measurements.len(),
                params_mhz: result.params,
                sigmas_mhz: params_of(sigmas),
                covariance_mhz2: result.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
                condition_number: result.condition_number,
                residuals: &result.residuals,
                selection_error_mhz: selection.map(params_of),
            };
            out.write_json("estimate.json", &body)?;
        }
        Format::Csv => {
            let rows: Vec<EstimateRow> = param_rows(values, sigmas)
                .into_iter()
                .enumerate()
                .map(|(i, r)| EstimateRow {
                    parameter: r.parameter,
                    value_mhz: r.value_mhz,
                    sigma_mhz: r.sigma_mhz,
                    selection_error_mhz: selection.map(|s| s[i]),
                })
                .collect();
            out.write_csv("estimate.csv", &rows)?;
        }
    }
    Ok(format!("{} transitions: {}", measurements.len(), format_params(&result.params)))
}

#[derive(Serialize)]
struct SubsetRow {
    transitions: String,
    full_rank: bool,
    covers_all_states: bool,
}

#[derive(Serialize)]
struct SubsetOutput<'a> {
    total: usize,
    complete: usize,
    covering_all_states: usize,
    subsets: &'a [SubsetRow],
}

pub fn subset_scan(out: &mut OutputDir) -> CliResult<String> {
    let rows: Vec<SubsetRow> = scan_subsets()
        .iter()
        .map(|s| SubsetRow {
            transitions: s.transitions().map(|t| t.label()).join(" "),
            full_rank: s.full_rank,
            covers_all_states: s.covers_all_states,
        })
        .collect();
    let complete = rows.iter().filter(|r| r.full_rank).count();
    let covering = rows.iter().filter(|r| r.covers_all_states).count();
    match out.format() {
        Format::Json => {
            let body = SubsetOutput { total: rows.len(), complete, covering_all_states: covering, subsets: &rows };
            out.write_json("subsets.json", &body)?;
        }
        Format::Csv => {
            out.write_csv("subsets.csv", &rows)?;
        }
    }
    Ok(format!("{complete} of {} seven-transition subsets are complete", rows.len()))
}
