use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use trispin_core::crosstalk::{
    calibrate, CalibrationConfig, CalibrationState, CrosstalkModel, DeviceConfig, ResidualMetrics, VirtualDevice,
};

use crate::error::{CliError, CliResult};
use crate::io::{read_json, OutputDir};
use crate::Format;

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Device JSON: `c` (rows, flux quanta per volt), `f0`, optional `labels`
    /// and `coupler`, plus readout fields such as `noise_sigma` and
    /// `hysteresis`. Without it the built-in five-loop device with the
    /// realistic readout preset is used.
    pub device: Option<PathBuf>,
    /// Calibration settings JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the number of iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Deserialize)]
struct DeviceFile {
    #[serde(flatten)]
    model: CrosstalkModel,
    #[serde(flatten)]
    readout: DeviceConfig,
}

#[derive(Serialize)]
struct ResidualRow {
    iteration: usize,
    mean_percent: f64,
    max_percent: f64,
}

#[derive(Serialize)]
struct CorrectionOutput<'a> {
    labels: &'a [String],
    iterations: usize,
    /// `M` in `V = M u`: column `j` is the voltage vector that moves loop `j` alone.
    correction: Vec<Vec<f64>>,
    f0_estimate: Vec<f64>,
    residual: &'a ResidualMetrics,
}

#[derive(Serialize)]
struct HistoryOutput<'a> {
    labels: &'a [String],
    states: &'a [CalibrationState],
}

pub fn run(args: &CalibrateArgs, out: &mut OutputDir) -> CliResult<String> {
    let seed = out.metadata.seed;
    let (model, readout) = match &args.device {
        Some(p) => {
            let f: DeviceFile = read_json(p)?;
            (f.model, DeviceConfig { seed, ..f.readout })
        }
        None => (CrosstalkModel::device_preset(), DeviceConfig::realistic(seed)),
    };
    let mut config = match &args.config {
        Some(p) => read_json::<CalibrationConfig>(p)?,
        None => CalibrationConfig::default(),
    };
    if let Some(n) = args.iterations {
        config.iterations = n;
    }
    let labels = model.labels.clone();
    let mut device = VirtualDevice::new(model, readout);
    let states = calibrate(&mut device, &config).map_err(CliError::domain)?;
    let last = states.last().ok_or_else(|| CliError::Domain("calibration produced no iterations".into()))?;

    let rows: Vec<ResidualRow> = states
        .iter()
        .map(|s| ResidualRow { iteration: s.iteration, mean_percent: s.metrics.mean_percent, max_percent: s.metrics.max_percent })
        .collect();
    out.write_csv("residuals.csv", &rows)?;
    let body = CorrectionOutput {
        labels: &labels,
        iterations: states.len(),
        correction: last.correction.row_iter().map(|r| r.iter().copied().collect()).collect(),
        f0_estimate: last.f0_estimate.iter().copied().collect(),
        residual: &last.metrics,
    };
    out.write_json("correction.json", &body)?;
    if out.format() == Format::Json {
        out.write_json("calibration_history.json", &HistoryOutput { labels: &labels, states: &states })?;
    }
    Ok(format!(
        "{} iterations: residual crosstalk mean {:.4}%, max {:.4}%",
        states.len(),
        last.metrics.mean_percent,
        last.metrics.max_percent
    ))
}
