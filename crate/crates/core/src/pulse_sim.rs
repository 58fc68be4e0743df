//! Synthetic experiment data from a known diagonal Hamiltonian.
//!
//! Two routes are provided. [`simulate_ramsey_trace`] evaluates the
//! closed-form fringe model with decay envelopes and seeded noise.
//! [`simulate_sequence_unitary`] propagates the 8-level state through a pulse
//! sequence with exact matrix exponentials; each pulse couples only its
//! addressed pair of basis states (rotating-wave approximation) and all other
//! levels evolve freely.
//!
//! Times are in ns and frequencies in MHz, so phases carry a factor `1e-3`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::spin_model::{energies, transition_frequency, BasisState, HamiltonianParams, TransitionId};

/// `2 pi f t` for f in MHz and t in ns.
pub fn phase(freq_mhz: f64, time_ns: f64) -> f64 {
    2.0 * PI * freq_mhz * time_ns * 1e-3
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("detuning {detuning_mhz:.3} MHz is at or above the Nyquist limit {nyquist_mhz:.3} MHz of the delay grid")]
    NyquistViolation { detuning_mhz: f64, nyquist_mhz: f64 },
    #[error("invalid delay grid: {0}")]
    BadGrid(String),
    #[error("invalid decoherence configuration: {0}")]
    BadDecoherence(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("photon order must be 1 or 2, got {0}")]
    BadPhotonOrder(u32),
}

/// Per-qubit relaxation and Ramsey decay times (ns), plus the decay constant of
/// the background from excited spectator qubits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceConfig {
    pub t1_ns: [f64; 3],
    pub t2_ns: [f64; 3],
    pub background_t1_ns: f64,
}

impl DecoherenceConfig {
    /// Values measured with all qubits and the coupler at their operating points.
    pub fn coupled_preset() -> Self {
        Self { t1_ns: [467.0, 338.0, 289.0], t2_ns: [142.0, 95.0, 146.0], background_t1_ns: 400.0 }
    }

    /// No decay at all.
    pub fn ideal() -> Self {
        Self { t1_ns: [f64::INFINITY; 3], t2_ns: [f64::INFINITY; 3], background_t1_ns: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        for q in 0..3 {
            let (t1, t2) = (self.t1_ns[q], self.t2_ns[q]);
            if !(t1 > 0.0) || !(t2 > 0.0) {
                return Err(PulseError::BadDecoherence(format!("qubit {}: T1 and T2 must be positive", q + 1)));
            }
            if t1.is_finite() && t2 > 2.0 * t1 {
                return Err(PulseError::BadDecoherence(format!("qubit {}: T2 = {t2} ns exceeds 2 T1", q + 1)));
            }
        }
        if !(self.background_t1_ns > 0.0) {
            return Err(PulseError::BadDecoherence("background decay constant must be positive".into()));
        }
        Ok(())
    }
}

/// Readout calibration of the closed-form signal `C0 + C1 exp(-t/T1bg) + A exp(-t/T2) cos(2 pi df t + phi)`.
///
/// `background_per_spectator` multiplies the number of excited spectator
/// qubits in the lower state to give `C1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub offset: f64,
    pub background_per_spectator: f64,
    pub amplitude: f64,
    pub phase_rad: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        Self { offset: 0.5, background_per_spectator: 0.08, amplitude: 0.4, phase_rad: 0.0 }
    }
}

/// Whether the transition lies above or below the drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamseyMetadata {
    pub transition: Option<TransitionId>,
    pub drive_frequency_mhz: f64,
    pub side: Side,
    pub noise_sigma: f64,
    pub seed: u64,
    pub t2_ns: f64,
    pub background_t1_ns: f64,
}

/// Readout signal versus Ramsey delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamseyTrace {
    pub delays_ns: Vec<f64>,
    pub signal: Vec<f64>,
    pub metadata: RamseyMetadata,
}

impl RamseyTrace {
    pub fn new(delays_ns: Vec<f64>, signal: Vec<f64>, metadata: RamseyMetadata) -> Result<Self, PulseError> {
        check_grid(&delays_ns)?;
        if delays_ns.len() != signal.len() {
            return Err(PulseError::BadGrid("delays and signal differ in length".into()));
        }
        Ok(Self { delays_ns, signal, metadata })
    }

    pub fn to_csv(&self) -> String {
        samples_csv("delay_ns", &self.delays_ns, &self.signal)
    }

    /// Parses the `delay_ns,signal` CSV form; metadata comes from the sidecar.
    pub fn from_csv(text: &str, metadata: RamseyMetadata) -> Result<Self, PulseError> {
        let (x, y) = parse_samples_csv(text)?;
        Self::new(x, y, metadata)
    }
}

fn samples_csv(x_name: &str, x: &[f64], y: &[f64]) -> String {
    let mut s = format!("{x_name},signal\n");
    for (a, b) in x.iter().zip(y) {
        s.push_str(&format!("{a},{b}\n"));
    }
    s
}

fn parse_samples_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>), PulseError> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',').map(|v| v.trim().parse::<f64>());
        match (it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b))) => {
                x.push(a);
                y.push(b);
            }
            _ => return Err(PulseError::BadGrid(format!("line {}: expected two numbers", n + 1))),
        }
    }
    Ok((x, y))
}

fn check_grid(delays: &[f64]) -> Result<(), PulseError> {
    if delays.is_empty() {
        return Err(PulseError::BadGrid("empty delay grid".into()));
    }
    if delays.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(PulseError::BadGrid("delays must be finite and non-negative".into()));
    }
    if delays.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PulseError::BadGrid("delays must be strictly increasing".into()));
    }
    Ok(())
}

/// Evenly spaced grid `start, start + step, ...` with `n` points.
pub fn uniform_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

fn nyquist_mhz(delays: &[f64]) -> f64 {
    let min_step = delays.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    // 1/(2 dt) with dt in ns, converted to MHz
    1e3 / (2.0 * min_step)
}

/// Closed-form Ramsey trace for `t` driven at `drive_mhz`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ramsey_trace(
    truth: &HamiltonianParams,
    t: TransitionId,
    drive_mhz: f64,
    decoherence: &DecoherenceConfig,
    signal_model: &SignalModel,
    noise_sigma: f64,
    seed: u64,
    delays_ns: &[f64],
) -> Result<RamseyTrace, PulseError> {
    check_grid(delays_ns)?;
    decoherence.validate()?;
    let detuning = transition_frequency(truth, t) - drive_mhz;
    if delays_ns.len() > 1 {
        let ny = nyquist_mhz(delays_ns);
        if detuning.abs() >= ny {
            return Err(PulseError::NyquistViolation { detuning_mhz: detuning, nyquist_mhz: ny });
        }
    }
    let t2 = decoherence.t2_ns[t.flipped()];
    let t1_bg = decoherence.background_t1_ns;
    let spectators = t.lower().excitations() as f64;
    let c1 = signal_model.background_per_spectator * spectators;
    let mut rng = rng_from_seed(seed);
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
    let signal = delays_ns
        .iter()
        .map(|&d| {
            let clean = signal_model.offset
                + c1 * (-d / t1_bg).exp()
                + signal_model.amplitude * (-d / t2).exp() * (phase(detuning, d) + signal_model.phase_rad).cos();
            clean + noise.map_or(0.0, |n| n.sample(&mut rng))
        })
        .collect();
    let metadata = RamseyMetadata {
        transition: Some(t),
        drive_frequency_mhz: drive_mhz,
        side: if detuning >= 0.0 { Side::Above } else { Side::Below },
        noise_sigma,
        seed,
        t2_ns: t2,
        background_t1_ns: t1_bg,
    };
    RamseyTrace::new(delays_ns.to_vec(), signal, metadata)
}

/// A rectangular pulse on one transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub lower: BasisState,
    pub upper: BasisState,
    /// Drive frequency; `None` drives the transition on resonance.
    pub drive_mhz: Option<f64>,
    pub phase_rad: f64,
    /// Rotation angle on resonance.
    pub angle_rad: f64,
    pub duration_ns: f64,
}

impl Pulse {
    pub fn resonant_pi(t: TransitionId, duration_ns: f64) -> Self {
        Self {
            lower: t.lower(),
            upper: t.upper(),
            drive_mhz: None,
            phase_rad: 0.0,
            angle_rad: PI,
            duration_ns,
        }
    }

    /// Rabi frequency (MHz) that produces `angle_rad` on resonance in `duration_ns`.
    pub fn rabi_mhz(&self) -> f64 {
        self.angle_rad / (2.0 * PI * self.duration_ns * 1e-3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SequenceStep {
    Pulse(Pulse),
    /// Placeholder filled by each value of the delay sweep.
    Delay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub steps: Vec<SequenceStep>,
    /// Basis state whose population is reported.
    pub readout: BasisState,
}

impl PulseSequence {
    /// State preparation by resonant pi pulses from the ground state to
    /// `t.lower()`, then pi/2 - delay - pi/2 on `t` at `drive_mhz`; reads `t.upper()`.
    pub fn ramsey(t: TransitionId, drive_mhz: f64, pi_duration_ns: f64) -> Self {
        let mut steps = Vec::new();
        let mut state = BasisState::GROUND;
        for q in 0..3 {
            if t.lower().bit(q) == 1 {
                let prep = TransitionId::from_flip(state, q).expect("bit is 0 before flipping");
                steps.push(SequenceStep::Pulse(Pulse::resonant_pi(prep, pi_duration_ns)));
                state = prep.upper();
            }
        }
        let half = Pulse {
            lower: t.lower(),
            upper: t.upper(),
            drive_mhz: Some(drive_mhz),
            phase_rad: 0.0,
            angle_rad: PI / 2.0,
            duration_ns: pi_duration_ns / 2.0,
        };
        steps.push(SequenceStep::Pulse(half));
        steps.push(SequenceStep::Delay);
        steps.push(SequenceStep::Pulse(half));
        Self { steps, readout: t.upper() }
    }

    fn validate(&self) -> Result<Vec<Option<(TransitionId, Pulse)>>, PulseError> {
        let delays = self.steps.iter().filter(|s| matches!(s, SequenceStep::Delay)).count();
        if delays > 1 {
            return Err(PulseError::InvalidSequence(format!("{delays} delay placeholders; at most one allowed")));
        }
        self.steps
            .iter()
            .map(|s| match s {
                SequenceStep::Delay => Ok(None),
                SequenceStep::Pulse(p) => {
                    let t = TransitionId::new(p.lower, p.upper).map_err(|_| {
                        PulseError::InvalidSequence(format!("pulse {}-{} does not address adjacent states", p.lower, p.upper))
                    })?;
                    if !(p.duration_ns > 0.0) || !p.duration_ns.is_finite() {
                        return Err(PulseError::InvalidSequence("pulse durations must be positive".into()));
                    }
                    Ok(Some((t, *p)))
                }
            })
            .collect()
    }
}

/// Populations of the readout state, one per delay.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOutcome {
    pub populations: Vec<f64>,
    /// Largest `|<psi|psi> - 1|` seen at any delay.
    pub max_norm_deviation: f64,
    pub warnings: Vec<String>,
}

type CVec = DVector<Complex64>;

fn expi(x: f64) -> Complex64 {
    Complex64::from_polar(1.0, x)
}

/// `exp(-i H tau)` for Hermitian `H` given in rad/ns.
fn hermitian_propagator(h: &DMatrix<Complex64>, tau_ns: f64) -> DMatrix<Complex64> {
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let phases = DMatrix::from_diagonal(&DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&e| expi(-e * tau_ns)),
    ));
    v * phases * v.adjoint()
}

/// Applies one pulse to lab-frame amplitudes at lab time `t0`.
///
/// In the frame where every state rotates at its own energy except `upper`,
/// which rotates at `E(lower) + f_drive`, the pulse Hamiltonian is constant:
/// the addressed block is `2 pi [[0, W/2 e^{i phi}], [W/2 e^{-i phi}, d]]`
/// with detuning `d = f_t - f_drive`, and every other entry is zero.
fn apply_pulse(psi: &mut CVec, e: &[f64; 8], t: TransitionId, p: &Pulse, t0: f64) {
    let (a, b) = (t.lower().index(), t.upper().index());
    let f_t = e[b] - e[a];
    let drive = p.drive_mhz.unwrap_or(f_t);
    let detuning = f_t - drive;
    let frame = |s: usize, time: f64| if s == b { phase(e[a] + drive, time) } else { phase(e[s], time) };
    let mut rot = CVec::from_fn(8, |s, _| psi[s] * expi(frame(s, t0)));
    let w = 2.0 * PI * p.rabi_mhz() * 1e-3;
    let mut h = DMatrix::<Complex64>::zeros(8, 8);
    h[(a, b)] = expi(p.phase_rad) * (w / 2.0);
    h[(b, a)] = expi(-p.phase_rad) * (w / 2.0);
    h[(b, b)] = Complex64::new(2.0 * PI * detuning * 1e-3, 0.0);
    rot = hermitian_propagator(&h, p.duration_ns) * rot;
    let t1 = t0 + p.duration_ns;
    for s in 0..8 {
        psi[s] = rot[s] * expi(-frame(s, t1));
    }
}

fn nearest_other_transition(truth: &HamiltonianParams, t: TransitionId) -> f64 {
    let f = transition_frequency(truth, t);
    crate::spin_model::enumerate_transitions()
        .into_iter()
        .filter(|&o| o != t)
        .map(|o| (transition_frequency(truth, o) - f).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Exact evolution of the sequence for each delay; returns the readout population.
pub fn simulate_sequence_unitary(
    truth: &HamiltonianParams,
    seq: &PulseSequence,
    delays_ns: &[f64],
) -> Result<UnitaryOutcome, PulseError> {
    let steps = seq.validate()?;
    let e = energies(truth);
    let mut warnings = Vec::new();
    for (t, p) in steps.iter().flatten() {
        let spacing = nearest_other_transition(truth, *t);
        if p.rabi_mhz().abs() > 0.25 * spacing {
            warnings.push(format!(
                "pulse on {t}: Rabi rate {:.2} MHz is not small against the {:.2} MHz spacing to the nearest other transition",
                p.rabi_mhz(),
                spacing
            ));
        }
    }
    let has_delay = steps.iter().any(|s| s.is_none());
    let sweep: Vec<f64> = if has_delay { delays_ns.to_vec() } else { vec![0.0; delays_ns.len()] };
    let mut populations = Vec::with_capacity(sweep.len());
    let mut max_dev: f64 = 0.0;
    for &delay in &sweep {
        let mut psi = CVec::from_element(8, Complex64::new(0.0, 0.0));
        psi[BasisState::GROUND.index()] = Complex64::new(1.0, 0.0);
        let mut clock = 0.0;
        for step in &steps {
            match step {
                None => {
                    for s in 0..8 {
                        psi[s] *= expi(-phase(e[s], delay));
                    }
                    clock += delay;
                }
                Some((t, p)) => {
                    apply_pulse(&mut psi, &e, *t, p, clock);
                    clock += p.duration_ns;
                }
            }
        }
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum();
        max_dev = max_dev.max((norm - 1.0).abs());
        populations.push(psi[seq.readout.index()].norm_sqr());
    }
    Ok(UnitaryOutcome { populations, max_norm_deviation: max_dev, warnings })
}

/// Drive strength model for Rabi experiments: `f_R = coupling * amplitude^order`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiConfig {
    pub coupling_mhz: f64,
    pub order: u32,
    pub decay_ns: f64,
    pub offset: f64,
    pub contrast: f64,
}

impl Default for RabiConfig {
    fn default() -> Self {
        Self { coupling_mhz: 10.0, order: 1, decay_ns: 400.0, offset: 0.5, contrast: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiTrace {
    pub durations_ns: Vec<f64>,
    pub signal: Vec<f64>,
    pub rabi_frequency_mhz: f64,
    pub amplitude: f64,
    pub order: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl RabiTrace {
    pub fn to_csv(&self) -> String {
        samples_csv("duration_ns", &self.durations_ns, &self.signal)
    }
}

/// Damped Rabi oscillation `offset - contrast/2 exp(-t/decay) cos(2 pi f_R t)` plus noise.
pub fn simulate_rabi(
    amplitude: f64,
    config: &RabiConfig,
    durations_ns: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<RabiTrace, PulseError> {
    if !(1..=2).contains(&config.order) {
        return Err(PulseError::BadPhotonOrder(config.order));
    }
    check_grid(durations_ns)?;
    let f = config.coupling_mhz * amplitude.abs().powi(config.order as i32);
    let mut rng = rng_from_seed(seed);
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).expect("finite sigma"));
    let signal = durations_ns
        .iter()
        .map(|&t| {
            // an undriven qubit stays in its ground state
            let envelope = if f == 0.0 { 1.0 } else { (-t / config.decay_ns).exp() };
            config.offset - 0.5 * config.contrast * envelope * phase(f, t).cos()
                + noise.map_or(0.0, |n| n.sample(&mut rng))
        })
        .collect();
    Ok(RabiTrace {
        durations_ns: durations_ns.to_vec(),
        signal,
        rabi_frequency_mhz: f,
        amplitude,
        order: config.order,
        noise_sigma,
        seed,
    })
}
