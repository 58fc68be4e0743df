//! Full measurement protocol: simulate a Ramsey trace for every transition,
//! fit each fringe, and estimate the Hamiltonian from the fitted frequencies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{solve_least_squares, EstimationError, EstimationResult, FrequencyMeasurement};
use crate::fitters::{fit_ramsey, transition_from_fit, FitReport};
use crate::pulse_sim::{simulate_ramsey_trace, uniform_grid, DecoherenceConfig, PulseError, Side, SignalModel};
use crate::rng::derive_seed;
use crate::spin_model::{enumerate_transitions, transition_frequency, HamiltonianParams, TransitionId, N_PARAMS};

/// Lower bound on the sigma handed to the weighted solve.
pub const MIN_SIGMA_MHZ: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Drive placed this far below each transition.
    pub detuning_mhz: f64,
    pub n_points: usize,
    pub step_ns: f64,
    pub noise_sigma: f64,
    pub decoherence: DecoherenceConfig,
    pub signal: SignalModel,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            detuning_mhz: 17.0,
            n_points: 200,
            step_ns: 2.0,
            noise_sigma: 0.022,
            decoherence: DecoherenceConfig { t2_ns: [150.0; 3], ..DecoherenceConfig::coupled_preset() },
            signal: SignalModel::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn noiseless() -> Self {
        Self { noise_sigma: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFit {
    pub transition: TransitionId,
    pub drive_mhz: f64,
    pub seed: u64,
    pub fit: Option<FitReport>,
    pub frequency_mhz: Option<f64>,
    pub sigma_mhz: Option<f64>,
    pub true_frequency_mhz: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub seed: u64,
    pub truth: HamiltonianParams,
    pub fits: Vec<TransitionFit>,
    pub estimate: EstimationResult,
    /// Recovered minus true parameters (MHz).
    pub deltas: [f64; N_PARAMS],
    /// Deltas in units of the propagated sigmas.
    pub pulls: [f64; N_PARAMS],
}

impl ProtocolReport {
    pub fn within_sigmas(&self, k: f64) -> bool {
        self.pulls.iter().all(|p| p.abs() <= k)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("only {usable} transitions were fitted and they do not form a complete set")]
    Incomplete { usable: usize, fits: Vec<TransitionFit> },
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

/// Runs the protocol for all twelve transitions. Transition `k` in canonical
/// order draws its noise from `derive_seed(seed, k)`.
pub fn run_protocol(truth: &HamiltonianParams, config: &ProtocolConfig, seed: u64) -> Result<ProtocolReport, ProtocolError> {
    let delays = uniform_grid(0.0, config.step_ns, config.n_points);
    let mut fits = Vec::new();
    let mut measurements = Vec::new();
    for (k, t) in enumerate_transitions().into_iter().enumerate() {
        let f = transition_frequency(truth, t);
        let drive = f - config.detuning_mhz;
        let s = derive_seed(seed, k as u64);
        let trace = simulate_ramsey_trace(truth, t, drive, &config.decoherence, &config.signal, config.noise_sigma, s, &delays)?;
        let mut record = TransitionFit {
            transition: t,
            drive_mhz: drive,
            seed: s,
            fit: None,
            frequency_mhz: None,
            sigma_mhz: None,
            true_frequency_mhz: f,
            error: None,
        };
        let side = if config.detuning_mhz >= 0.0 { Side::Above } else { Side::Below };
        match fit_ramsey(&trace, None) {
            Ok(fit) => {
                let (value, sigma) = transition_from_fit(drive, 0.0, &fit, side);
                record.fit = Some(fit.report());
                record.frequency_mhz = Some(value);
                record.sigma_mhz = Some(sigma);
                measurements.push(FrequencyMeasurement::new(t, value, sigma.max(MIN_SIGMA_MHZ)));
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        fits.push(record);
    }
    let estimate = match solve_least_squares(&measurements) {
        Ok(e) => e,
        Err(EstimationError::SingularDesign { .. } | EstimationError::WrongCount { .. }) => {
            return Err(ProtocolError::Incomplete { usable: measurements.len(), fits })
        }
        Err(e) => return Err(e.into()),
    };
    let truth_arr = truth.to_array();
    let est = estimate.params.to_array();
    let sig = estimate.sigmas();
    let deltas = std::array::from_fn(|i| est[i] - truth_arr[i]);
    let pulls = std::array::from_fn(|i| if sig[i] > 0.0 { deltas[i] / sig[i] } else { 0.0 });
    Ok(ProtocolReport { seed, truth: *truth, fits, estimate, deltas, pulls })
}
