use std::path::PathBuf;
use std::thread;

use clap::Args;
use serde::{Deserialize, Serialize};
use trispin_core::protocol::{run_protocol, ProtocolConfig, ProtocolError, ProtocolReport, TransitionFit};
use trispin_core::rng::derive_seed;
use trispin_core::spin_model::{HamiltonianParams, N_PARAMS, PARAM_NAMES};

use super::{format_params, params_of};
use crate::error::{CliError, CliResult};
use crate::io::{read_json, OutputDir};
use crate::Format;

#[derive(Debug, Args)]
pub struct EndToEndArgs {
    /// JSON with `params_mhz: {omega1, ..., k123}`; defaults to the reference device.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Protocol settings JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of independent noise realizations. Trial `i` uses seed
    /// `derive_seed(seed, i)`.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Pull threshold used for the coverage summary.
    #[arg(long, default_value_t = 3.0)]
    pub sigmas: f64,
}

#[derive(Deserialize)]
struct TruthFile {
    params_mhz: HamiltonianParams,
}

#[derive(Serialize)]
struct Trial<'a> {
    trial: usize,
    seed: u64,
    estimate_mhz: HamiltonianParams,
    sigmas_mhz: HamiltonianParams,
    deltas_mhz: HamiltonianParams,
    pulls: HamiltonianParams,
    within_sigmas: bool,
    fits: &'a [TransitionFit],
}

#[derive(Serialize)]
struct EndToEndOutput<'a> {
    truth_mhz: HamiltonianParams,
    config: &'a ProtocolConfig,
    trials: Vec<Trial<'a>>,
    sigma_threshold: f64,
    within_sigmas: usize,
    coverage: f64,
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    seed: u64,
    parameter: &'static str,
    true_mhz: f64,
    estimate_mhz: f64,
    sigma_mhz: f64,
    delta_mhz: f64,
    pull: f64,
}

#[derive(Serialize)]
struct FitRow {
    trial: usize,
    transition: String,
    drive_mhz: f64,
    true_frequency_mhz: f64,
    frequency_mhz: Option<f64>,
    sigma_mhz: Option<f64>,
    error: Option<String>,
}

/// Runs every trial over the available cores and returns results in trial order.
fn run_trials(
    truth: &HamiltonianParams,
    config: &ProtocolConfig,
    seed: u64,
    n: usize,
) -> Vec<Result<ProtocolReport, ProtocolError>> {
    let workers = thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let mut results: Vec<Option<Result<ProtocolReport, ProtocolError>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        for (w, chunk) in results.chunks_mut(n.div_ceil(workers).max(1)).enumerate() {
            let start = w * n.div_ceil(workers).max(1);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let trial = start + k;
                    *slot = Some(run_protocol(truth, config, derive_seed(seed, trial as u64)));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("every trial runs")).collect()
}

pub fn run(args: &EndToEndArgs, out: &mut OutputDir) -> CliResult<String> {
    if args.trials == 0 {
        return Err(CliError::Schema("--trials must be at least 1".into()));
    }
    let truth = match &args.truth {
        Some(p) => read_json::<TruthFile>(p)?.params_mhz,
        None => HamiltonianParams::reference_device(),
    };
    let config = match &args.config {
        Some(p) => read_json::<ProtocolConfig>(p)?,
        None => ProtocolConfig::default(),
    };
    let seed = out.metadata.seed;
    let mut reports = Vec::with_capacity(args.trials);
    for (i, r) in run_trials(&truth, &config, seed, args.trials).into_iter().enumerate() {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => return Err(CliError::Domain(format!("trial {i}: {e}"))),
        }
    }
    let within = reports.iter().filter(|r| r.within_sigmas(args.sigmas)).count();
    let coverage = within as f64 / reports.len() as f64;

    match out.format() {
        Format::Json => {
            let trials = reports
                .iter()
                .enumerate()
                .map(|(i, r)| Trial {
                    trial: i,
                    seed: r.seed,
                    estimate_mhz: r.estimate.params,
                    sigmas_mhz: params_of(r.estimate.sigmas()),
                    deltas_mhz: params_of(r.deltas),
                    pulls: params_of(r.pulls),
                    within_sigmas: r.within_sigmas(args.sigmas),
                    fits: &r.fits,
                })
                .collect();
            let body = EndToEndOutput {
                truth_mhz: truth,
                config: &config,
                trials,
                sigma_threshold: args.sigmas,
                within_sigmas: within,
                coverage,
            };
            out.write_json("end_to_end.json", &body)?;
        }
        Format::Csv => {
            let t = truth.to_array();
            let mut rows = Vec::new();
            let mut fits = Vec::new();
            for (i, r) in reports.iter().enumerate() {
                let est = r.estimate.params.to_array();
                let sig = r.estimate.sigmas();
                for k in 0..N_PARAMS {
                    rows.push(TrialRow {
                        trial: i,
                        seed: r.seed,
                        parameter: PARAM_NAMES[k],
                        true_mhz: t[k],
                        estimate_mhz: est[k],
                        sigma_mhz: sig[k],
                        delta_mhz: r.deltas[k],
                        pull: r.pulls[k],
                    });
                }
                fits.extend(r.fits.iter().map(|f| FitRow {
                    trial: i,
                    transition: f.transition.label(),
                    drive_mhz: f.drive_mhz,
                    true_frequency_mhz: f.true_frequency_mhz,
                    frequency_mhz: f.frequency_mhz,
                    sigma_mhz: f.sigma_mhz,
                    error: f.error.clone(),
                }));
            }
            out.write_csv("end_to_end.csv", &rows)?;
            out.write_csv("transition_fits.csv", &fits)?;
        }
    }
    Ok(format!(
        "{} trial(s); {within} within {} sigma ({:.1}%); first trial: {}",
        reports.len(),
        args.sigmas,
        100.0 * coverage,
        format_params(&reports[0].estimate.params)
    ))
}
