use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use trispin_core::multimode::{
    coupler_gap_sweep, default_gap_values, exact_diagonalize, extract_effective_params, identify_computational_states,
    CompositeFile, CouplerTemplate, SweepRow, DEFAULT_DIMENSION_CAP, DEFAULT_OVERLAP_THRESHOLD,
};
use trispin_core::spin_model::{HamiltonianParams, TransitionId};

use super::format_params;
use crate::error::{CliError, CliResult};
use crate::io::{read_json, OutputDir};
use crate::Format;

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Template JSON overriding fields of the default coupler template.
    #[arg(long, conflicts_with = "system")]
    pub template: Option<PathBuf>,
    /// Composite system JSON; extracts effective parameters for this one system.
    #[arg(long)]
    pub system: Option<PathBuf>,
    /// Coupler gaps in MHz, strictly descending, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub gaps_mhz: Option<Vec<f64>>,
    /// Minimum overlap for an unambiguous computational state.
    #[arg(long, default_value_t = DEFAULT_OVERLAP_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    template: &'a CouplerTemplate,
    threshold: f64,
    rows: &'a [SweepRow],
    monotonicity_violations: &'a [usize],
}

#[derive(Serialize)]
struct SystemOutput {
    params_mhz: HamiltonianParams,
    rms_residual_mhz: f64,
    min_overlap: f64,
    overlaps: [f64; 8],
    energies_mhz: [f64; 8],
    transitions_mhz: Vec<(TransitionId, f64)>,
}

#[derive(Serialize)]
struct SystemRow {
    transition: String,
    frequency_mhz: f64,
}

fn single_system(path: &PathBuf, threshold: f64, out: &mut OutputDir) -> CliResult<String> {
    let file: CompositeFile = read_json(path)?;
    let (system, qubits) = file.build().map_err(|e| CliError::schema(path, e))?;
    let spectrum = exact_diagonalize(&system, DEFAULT_DIMENSION_CAP).map_err(CliError::domain)?;
    let ex = identify_computational_states(&system, &spectrum, qubits, threshold).map_err(CliError::domain)?;
    let est = extract_effective_params(&ex).map_err(CliError::domain)?;
    match out.format() {
        Format::Json => {
            let body = SystemOutput {
                params_mhz: est.params,
                rms_residual_mhz: est.rms_residual(),
                min_overlap: ex.min_overlap,
                overlaps: ex.overlaps,
                energies_mhz: ex.energies,
                transitions_mhz: ex.transitions.clone(),
            };
            out.write_json("effective.json", &body)?;
        }
        Format::Csv => {
            let rows: Vec<SystemRow> = ex
                .transitions
                .iter()
                .map(|(t, f)| SystemRow { transition: t.label(), frequency_mhz: *f })
                .collect();
            out.write_csv("effective.csv", &rows)?;
        }
    }
    Ok(format!("min overlap {:.4}; {}", ex.min_overlap, format_params(&est.params)))
}

pub fn run(args: &SweepArgs, out: &mut OutputDir) -> CliResult<String> {
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(CliError::Schema("--threshold must lie in (0, 1]".into()));
    }
    if let Some(p) = &args.system {
        return single_system(p, args.threshold, out);
    }
    let template = match &args.template {
        Some(p) => read_json::<CouplerTemplate>(p)?,
        None => CouplerTemplate::default(),
    };
    let gaps = args.gaps_mhz.clone().unwrap_or_else(default_gap_values);
    let sweep = coupler_gap_sweep(&template, &gaps, args.threshold).map_err(CliError::domain)?;
    match out.format() {
        Format::Json => {
            let body = SweepOutput {
                template: &template,
                threshold: args.threshold,
                rows: &sweep.rows,
                monotonicity_violations: &sweep.monotonicity_violations,
            };
            out.write_json("coupling_sweep.json", &body)?;
        }
        Format::Csv => {
            out.write_text("coupling_sweep.csv", &sweep.to_csv())?;
        }
    }
    let flagged = sweep.rows.iter().filter(|r| r.flagged).count();
    let first = &sweep.rows[0];
    let last = &sweep.rows[sweep.rows.len() - 1];
    Ok(format!(
        "{} gaps, {flagged} flagged; K123 {:.4} MHz at {} MHz, {:.4} MHz at {} MHz",
        sweep.rows.len(),
        first.params.k123,
        first.gap_mhz,
        last.params.k123,
        last.gap_mhz
    ))
}
