//! Damped-cosine fits for Ramsey fringes and Rabi oscillations.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::lm::{levenberg_marquardt, CurveModel, LmConfig};
use super::{FitError, FitResult};
use crate::pulse_sim::{phase, RabiTrace, RamseyTrace, Side};

/// `C0 + C1 exp(-t/T_bg) + A exp(-g t) cos(2 pi f t + phi)`, t in ns, f in MHz.
///
/// Parameter order: f, g, A, phi, C0, then C1 when a background decay
/// constant is set. `T_bg` itself is not fitted.
struct DampedCosine {
    background_ns: Option<f64>,
}

impl CurveModel for DampedCosine {
    fn n_params(&self) -> usize {
        if self.background_ns.is_some() {
            6
        } else {
            5
        }
    }

    fn value(&self, p: &[f64], t: f64) -> f64 {
        let osc = p[2] * (-p[1] * t).exp() * (phase(p[0], t) + p[3]).cos();
        let bg = self.background_ns.map_or(0.0, |tb| p[5] * (-t / tb).exp());
        p[4] + bg + osc
    }

    fn gradient(&self, p: &[f64], t: f64, g: &mut [f64]) {
        let env = (-p[1] * t).exp();
        let th = phase(p[0], t) + p[3];
        let (s, c) = th.sin_cos();
        g[0] = -p[2] * env * s * 2.0 * PI * t * 1e-3;
        g[1] = -t * p[2] * env * c;
        g[2] = env * c;
        g[3] = -p[2] * env * s;
        g[4] = 1.0;
        if let Some(tb) = self.background_ns {
            g[5] = (-t / tb).exp();
        }
    }
}

/// Optional starting point for the frequency and decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationGuess {
    pub frequency_mhz: f64,
    pub decay_time_ns: f64,
}

const MIN_SAMPLES: usize = 8;
const ZERO_PAD: usize = 8;

/// Dominant frequency of `y(t)` from a zero-padded direct Fourier sum.
///
/// Scans `k / (pad * span)` for k >= 1 up to the Nyquist limit of the
/// smallest step; ties go to the lower frequency.
pub fn spectral_peak(ts: &[f64], ys: &[f64]) -> f64 {
    let span = ts[ts.len() - 1] - ts[0];
    let min_step = ts.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let nyquist = 1e3 / (2.0 * min_step);
    let df = 1e3 / (ZERO_PAD as f64 * span);
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut best = (df, -1.0);
    let mut k = 1;
    loop {
        let f = k as f64 * df;
        if f > nyquist {
            break;
        }
        let sum: Complex64 = ts
            .iter()
            .zip(ys)
            .map(|(&t, &y)| Complex64::from_polar(y - mean, -phase(f, t)))
            .sum();
        let power = sum.norm_sqr();
        if power > best.1 {
            best = (f, power);
        }
        k += 1;
    }
    best.0
}

/// Linear least squares for the offsets and quadrature amplitudes at fixed
/// frequency and decay. Returns `(params, cost)` in model order.
fn linear_stage(ts: &[f64], ys: &[f64], f: f64, g: f64, background_ns: Option<f64>) -> Option<(Vec<f64>, f64)> {
    let ncol = if background_ns.is_some() { 4 } else { 3 };
    let a = DMatrix::from_fn(ts.len(), ncol, |i, j| {
        let t = ts[i];
        let env = (-g * t).exp();
        match j {
            0 => env * phase(f, t).cos(),
            1 => env * phase(f, t).sin(),
            2 => 1.0,
            _ => (-t / background_ns.unwrap()).exp(),
        }
    });
    let y = DVector::from_column_slice(ys);
    let sol = a.clone().svd(true, true).solve(&y, 1e-12).ok()?;
    let cost = (&a * &sol - &y).norm_squared();
    // a cos(th) + b sin(th) = A cos(th + phi) with A cos(phi) = a, A sin(phi) = -b
    let amp = sol[0].hypot(sol[1]);
    let ph = (-sol[1]).atan2(sol[0]);
    let mut p = vec![f, g, amp, ph, sol[2]];
    if background_ns.is_some() {
        p.push(sol[3]);
    }
    Some((p, cost))
}

fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Shared fit of a damped cosine, returning values in internal order
/// (f, g, A, phi, C0[, C1]) normalized to f >= 0 and A >= 0.
fn fit_damped_cosine(
    ts: &[f64],
    ys: &[f64],
    background_ns: Option<f64>,
    noise_sigma: f64,
    guess: Option<OscillationGuess>,
) -> Result<(Vec<f64>, DMatrix<f64>, f64, usize, usize), FitError> {
    let n = ts.len();
    if n < MIN_SAMPLES || ys.len() != n {
        return Err(FitError::InsufficientData(format!("need at least {MIN_SAMPLES} samples, got {n}")));
    }
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FitError::InsufficientData("sample times must be strictly increasing".into()));
    }
    let background_ns = background_ns.filter(|t| t.is_finite() && *t > 0.0);
    // signal spread after removing the offset and the background decay
    let detrended: Vec<f64> = match background_ns {
        Some(tb) => {
            let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (-ts[i] / tb).exp() });
            match a.clone().svd(true, true).solve(&DVector::from_column_slice(ys), 1e-12) {
                Ok(c) => (0..n).map(|i| ys[i] - c[0] - c[1] * a[(i, 1)]).collect(),
                Err(_) => ys.to_vec(),
            }
        }
        None => {
            let mean = ys.iter().sum::<f64>() / n as f64;
            ys.iter().map(|y| y - mean).collect()
        }
    };
    let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1.0);
    let sd = (detrended.iter().map(|y| y * y).sum::<f64>() / n as f64).sqrt();
    let floor = noise_sigma.max(0.0) * (1.0 + 3.0 / (2.0 * n as f64).sqrt());
    if sd <= floor || sd <= 1e-12 * scale {
        return Err(FitError::DegenerateData(format!(
            "signal spread {sd:.3e} does not exceed the noise floor {floor:.3e}"
        )));
    }
    let span = ts[n - 1] - ts[0];

    let (f0, decays) = match guess {
        Some(g) => (g.frequency_mhz.abs(), vec![1.0 / g.decay_time_ns]),
        None => {
            let f = spectral_peak(ts, &detrended);
            (f, [0.0, 0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|k| k / span).collect())
        }
    };
    let (p0, _) = decays
        .iter()
        .filter_map(|&g| linear_stage(ts, ys, f0, g, background_ns))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| FitError::DegenerateData("linear stage failed".into()))?;

    let model = DampedCosine { background_ns };
    let out = levenberg_marquardt(&model, ts, ys, &p0, &LmConfig::default());
    if !out.converged {
        return Err(FitError::NonConvergence { iterations: out.n_iter });
    }
    let mut p = out.params;
    let np = p.len();
    let mut signs = vec![1.0; np];
    if p[2] < 0.0 {
        p[2] = -p[2];
        p[3] += PI;
        signs[2] = -1.0;
    }
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] = -p[3];
        signs[0] = -signs[0];
        signs[3] = -signs[3];
    }
    p[3] = wrap_phase(p[3]);
    let d = DMatrix::from_diagonal(&DVector::from_vec(signs));
    let cov = &d * out.covariance * &d;
    if p[0] * span * 1e-3 < 1.0 {
        return Err(FitError::InsufficientData(format!(
            "fitted frequency {:.4} MHz gives fewer than one period over {span} ns",
            p[0]
        )));
    }
    Ok((p, cov, out.chi2, out.dof, out.n_iter))
}

fn to_fit_result(
    names: &[&str],
    p: Vec<f64>,
    cov: DMatrix<f64>,
    chi2: f64,
    dof: usize,
    n_iter: usize,
) -> FitResult {
    // report 1/g as a decay time, with the covariance mapped through d(1/g)/dg
    let g = p[1];
    let mut values = p;
    let mut jac = DMatrix::identity(values.len(), values.len());
    if g > 0.0 {
        values[1] = 1.0 / g;
        jac[(1, 1)] = -1.0 / (g * g);
    } else {
        values[1] = f64::INFINITY;
        jac[(1, 1)] = 0.0;
    }
    let covariance = &jac * cov * jac.transpose();
    FitResult::new(
        names.iter().map(|s| s.to_string()).collect(),
        values,
        covariance,
        if dof > 0 { chi2 / dof as f64 } else { 0.0 },
        n_iter,
        true,
    )
}

pub const RAMSEY_PARAMS: [&str; 6] = ["detuning_mhz", "t2_ns", "amplitude", "phase_rad", "offset", "background"];
pub const RABI_PARAMS: [&str; 5] = ["rabi_frequency_mhz", "decay_ns", "amplitude", "phase_rad", "offset"];

/// Fits a Ramsey trace. The spectator background decay constant is taken
/// from the trace metadata and held fixed.
///
/// The returned detuning is `|df|`; which side of the drive the transition
/// sits on is not observable from the fringe and comes from the metadata.
pub fn fit_ramsey(trace: &RamseyTrace, guess: Option<OscillationGuess>) -> Result<FitResult, FitError> {
    let bg = Some(trace.metadata.background_t1_ns);
    let (p, cov, chi2, dof, n_iter) =
        fit_damped_cosine(&trace.delays_ns, &trace.signal, bg, trace.metadata.noise_sigma, guess)?;
    let mut names: Vec<&str> = RAMSEY_PARAMS.to_vec();
    if p.len() == 5 {
        names.pop();
    }
    Ok(to_fit_result(&names, p, cov, chi2, dof, n_iter))
}

pub fn fit_rabi(trace: &RabiTrace) -> Result<FitResult, FitError> {
    let (p, cov, chi2, dof, n_iter) =
        fit_damped_cosine(&trace.durations_ns, &trace.signal, None, trace.noise_sigma, None)?;
    Ok(to_fit_result(&RABI_PARAMS, p, cov, chi2, dof, n_iter))
}

/// Transition frequency and its sigma: `drive + df` when the transition is
/// above the drive, `drive - df` when below. `drive_sigma` is added in quadrature.
pub fn transition_from_fit(drive_mhz: f64, drive_sigma: f64, fit: &FitResult, side: Side) -> (f64, f64) {
    let (df, s) = fit.get("detuning_mhz").expect("Ramsey fit has a detuning");
    let value = match side {
        Side::Above => drive_mhz + df,
        Side::Below => drive_mhz - df,
    };
    (value, drive_sigma.hypot(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotonOrder {
    One,
    Two,
    Ambiguous,
}

pub const DEFAULT_ORDER_TOLERANCE: f64 = 0.5;

/// Classifies a transition by how its Rabi frequency scales when the drive
/// amplitude doubles: ratio 2 for one photon, 4 for two.
pub fn classify_photon_order(rabi_at_a: f64, rabi_at_2a: f64, tolerance: f64) -> PhotonOrder {
    if !(rabi_at_a > 0.0) || !(rabi_at_2a > 0.0) {
        return PhotonOrder::Ambiguous;
    }
    let r = rabi_at_2a / rabi_at_a;
    if (r - 2.0).abs() < tolerance {
        PhotonOrder::One
    } else if (r - 4.0).abs() < tolerance {
        PhotonOrder::Two
    } else {
        PhotonOrder::Ambiguous
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse_sim::{simulate_rabi, simulate_ramsey_trace, uniform_grid, DecoherenceConfig, RabiConfig, SignalModel};
    use crate::spin_model::{transition_frequency, HamiltonianParams, TransitionId};

    fn trace(noise: f64, seed: u64, t2: f64, t: &str) -> (RamseyTrace, f64) {
        let p = HamiltonianParams::reference_device();
        let t: TransitionId = t.parse().unwrap();
        let f = transition_frequency(&p, t);
        let mut dec = DecoherenceConfig::coupled_preset();
        dec.t2_ns = [t2; 3];
        let tr = simulate_ramsey_trace(&p, t, f - 17.0, &dec, &SignalModel::default(), noise, seed, &uniform_grid(0.0, 2.0, 200)).unwrap();
        (tr, f)
    }

    #[test]
    fn noiseless_fit_recovers_detuning() {
        for t in ["000-001", "110-111", "100-101"] {
            let (tr, _) = trace(0.0, 0, 150.0, t);
            let fit = fit_ramsey(&tr, None).unwrap();
            let (df, _) = fit.get("detuning_mhz").unwrap();
            assert!((df - 17.0).abs() < 17.0 * 1e-6, "{t}: {df}");
            assert!((fit.get("t2_ns").unwrap().0 - 150.0).abs() < 1e-4);
            assert!(fit.converged);
            assert!(fit.n_iter <= 200);
        }
    }

    #[test]
    fn transition_frequency_from_fit() {
        let (tr, f) = trace(0.0, 0, 150.0, "001-011");
        let fit = fit_ramsey(&tr, None).unwrap();
        let (v, s) = transition_from_fit(tr.metadata.drive_frequency_mhz, 0.0, &fit, tr.metadata.side);
        assert!((v - f).abs() < 1e-5);
        assert_eq!(s, fit.get("detuning_mhz").unwrap().1);

        let manual = FitResult::new(
            vec!["detuning_mhz".into()],
            vec![17.69],
            DMatrix::from_element(1, 1, 0.02f64.powi(2)),
            1.0,
            1,
            true,
        );
        let (v, s) = transition_from_fit(5163.0, 0.0, &manual, Side::Above);
        assert!((v - 5180.69).abs() < 1e-9);
        assert!((s - 0.02).abs() < 1e-15);
        let zero = FitResult::new(vec!["detuning_mhz".into()], vec![0.0], DMatrix::zeros(1, 1), 1.0, 1, true);
        assert_eq!(transition_from_fit(5163.0, 0.0, &zero, Side::Below).0, 5163.0);
    }

    #[test]
    fn noisy_fit_coverage() {
        let mut within3 = 0;
        let mut within1 = 0;
        let n = 500;
        let mut sigmas = Vec::new();
        for seed in 0..n {
            let (tr, _) = trace(0.05, seed, 150.0, "000-010");
            let fit = fit_ramsey(&tr, None).unwrap();
            let (df, s) = fit.get("detuning_mhz").unwrap();
            sigmas.push(s);
            if (df - 17.0).abs() <= 3.0 * s {
                within3 += 1;
            }
            if (df - 17.0).abs() <= s {
                within1 += 1;
            }
        }
        assert!(within3 as f64 >= 0.99 * n as f64, "3-sigma coverage {within3}/{n}");
        let frac1 = within1 as f64 / n as f64;
        assert!((frac1 - 0.68).abs() <= 0.05, "1-sigma coverage {frac1}");
        sigmas.sort_by(|a, b| a.total_cmp(b));
        let med = sigmas[sigmas.len() / 2];
        // tens of kHz
        assert!(med > 0.005 && med < 0.1, "median sigma {med} MHz");
    }

    #[test]
    fn scale_covariance() {
        let (tr, _) = trace(0.05, 3, 150.0, "100-110");
        let base = fit_ramsey(&tr, None).unwrap();
        for c in [0.1, 3.0, 250.0] {
            let mut scaled = tr.clone();
            scaled.signal.iter_mut().for_each(|s| *s *= c);
            scaled.metadata.noise_sigma *= c;
            let fit = fit_ramsey(&scaled, None).unwrap();
            for name in ["detuning_mhz", "t2_ns"] {
                let (a, b) = (fit.get(name).unwrap().0, base.get(name).unwrap().0);
                assert!((a - b).abs() <= 1e-8 * b.abs(), "{name}: {a} vs {b}");
            }
            for name in ["amplitude", "offset", "background"] {
                let (a, b) = (fit.get(name).unwrap().0, base.get(name).unwrap().0 * c);
                assert!((a - b).abs() <= 1e-8 * b.abs().max(c * 1e-3), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_and_short_traces() {
        let p = HamiltonianParams::reference_device();
        let t: TransitionId = "000-001".parse().unwrap();
        let f = transition_frequency(&p, t);
        let flat = simulate_ramsey_trace(&p, t, f, &DecoherenceConfig::ideal(), &SignalModel::default(), 0.0, 0, &uniform_grid(0.0, 2.0, 100)).unwrap();
        assert!(matches!(fit_ramsey(&flat, None), Err(FitError::DegenerateData(_))));
        let mut noise_only = simulate_ramsey_trace(&p, t, f, &DecoherenceConfig::ideal(), &SignalModel { amplitude: 0.0, ..Default::default() }, 0.05, 1, &uniform_grid(0.0, 2.0, 200)).unwrap();
        noise_only.metadata.noise_sigma = 0.05;
        assert!(matches!(fit_ramsey(&noise_only, None), Err(FitError::DegenerateData(_))));
        let (mut short, _) = trace(0.0, 0, 150.0, "000-001");
        short.delays_ns.truncate(7);
        short.signal.truncate(7);
        assert!(matches!(fit_ramsey(&short, None), Err(FitError::InsufficientData(_))));
    }

    #[test]
    fn guess_is_honoured() {
        let (tr, _) = trace(0.02, 8, 150.0, "010-011");
        let fit = fit_ramsey(&tr, Some(OscillationGuess { frequency_mhz: 16.0, decay_time_ns: 100.0 })).unwrap();
        assert!((fit.get("detuning_mhz").unwrap().0 - 17.0).abs() < 0.1);
    }

    #[test]
    fn spectral_peak_finds_tone() {
        let ts = uniform_grid(0.0, 2.0, 256);
        let ys: Vec<f64> = ts.iter().map(|&t| phase(23.0, t).cos()).collect();
        let f = spectral_peak(&ts, &ys);
        assert!((f - 23.0).abs() < 1e3 / (8.0 * 510.0));
    }

    #[test]
    fn rabi_period_scaling() {
        let grid = uniform_grid(0.0, 1.0, 400);
        let cfg1 = RabiConfig::default();
        let cfg2 = RabiConfig { order: 2, coupling_mhz: 4.0, ..Default::default() };
        let f = |amp: f64, cfg: &RabiConfig, seed| {
            let tr = simulate_rabi(amp, cfg, &grid, 0.02, seed).unwrap();
            fit_rabi(&tr).unwrap().get("rabi_frequency_mhz").unwrap().0
        };
        let (a1, b1) = (f(1.0, &cfg1, 1), f(2.0, &cfg1, 2));
        let (a2, b2) = (f(1.0, &cfg2, 3), f(2.0, &cfg2, 4));
        // period ratio = inverse frequency ratio
        assert!(((1.0 / b1) / (1.0 / a1) - 0.5).abs() < 0.005);
        assert!(((1.0 / b2) / (1.0 / a2) - 0.25).abs() < 0.0025);
        assert_eq!(classify_photon_order(a1, b1, DEFAULT_ORDER_TOLERANCE), PhotonOrder::One);
        assert_eq!(classify_photon_order(a2, b2, DEFAULT_ORDER_TOLERANCE), PhotonOrder::Two);
        let flat = simulate_rabi(0.0, &cfg1, &grid, 0.0, 0).unwrap();
        assert!(fit_rabi(&flat).is_err());
    }

    #[test]
    fn photon_order_thresholds() {
        assert_eq!(classify_photon_order(1.0, 2.0, 0.5), PhotonOrder::One);
        assert_eq!(classify_photon_order(1.0, 4.0, 0.5), PhotonOrder::Two);
        assert_eq!(classify_photon_order(1.0, 3.0, 0.5), PhotonOrder::Ambiguous);
        assert_eq!(classify_photon_order(0.0, 3.0, 0.5), PhotonOrder::Ambiguous);
    }
}
