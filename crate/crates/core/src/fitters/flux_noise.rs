//! Flux-noise amplitude from dephasing rates measured at several flux slopes.
//!
//! Under 1/f flux noise with spectral density `A / |f|`, the echo dephasing
//! rate is `Gamma = sqrt(A ln 2) |d omega / d Phi|`.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DephasingPoint {
    /// `|d omega / d Phi|` in rad/s per flux quantum.
    pub flux_slope: f64,
    /// Pure-dephasing rate in 1/s.
    pub gamma_phi: f64,
}

impl DephasingPoint {
    pub fn new(flux_slope: f64, gamma_phi: f64) -> Result<Self, FitError> {
        if !(flux_slope >= 0.0 && flux_slope.is_finite() && gamma_phi >= 0.0 && gamma_phi.is_finite()) {
            return Err(FitError::DegenerateData(format!(
                "slope {flux_slope} and rate {gamma_phi} must be finite magnitudes"
            )));
        }
        Ok(Self { flux_slope, gamma_phi })
    }

    /// From a slope in Hz per flux quantum, converted to angular frequency.
    pub fn from_linear_slope(hz_per_phi0: f64, gamma_phi: f64) -> Result<Self, FitError> {
        Self::new(2.0 * PI * hz_per_phi0.abs(), gamma_phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxNoiseFit {
    /// `sqrt(A)` in flux quanta.
    pub sqrt_amplitude: f64,
    pub sqrt_amplitude_sigma: f64,
    /// Fitted `sqrt(A ln 2)`.
    pub slope: f64,
    pub slope_sigma: f64,
    pub n_points: usize,
}

impl FluxNoiseFit {
    pub fn sqrt_amplitude_micro_phi0(&self) -> f64 {
        self.sqrt_amplitude * 1e6
    }

    pub fn sqrt_amplitude_sigma_micro_phi0(&self) -> f64 {
        self.sqrt_amplitude_sigma * 1e6
    }

    pub fn predict(&self, flux_slope: f64) -> f64 {
        dephasing_rate(self.sqrt_amplitude, flux_slope)
    }
}

/// `Gamma = sqrt(A ln 2) |slope|` for `sqrt(A)` in flux quanta and slope in rad/s/Phi0.
pub fn dephasing_rate(sqrt_amplitude: f64, flux_slope: f64) -> f64 {
    sqrt_amplitude * LN_2.sqrt() * flux_slope.abs()
}

/// Zero-intercept regression of the dephasing rate against the flux slope.
pub fn fit_flux_noise(points: &[DephasingPoint]) -> Result<FluxNoiseFit, FitError> {
    let n = points.len();
    if n < 2 {
        return Err(FitError::InsufficientData(format!("need at least 2 points, got {n}")));
    }
    let first = points[0].flux_slope;
    if points.iter().all(|p| p.flux_slope == first) {
        return Err(FitError::DegenerateData("all flux slopes are equal".into()));
    }
    let sxx: f64 = points.iter().map(|p| p.flux_slope * p.flux_slope).sum();
    let sxy: f64 = points.iter().map(|p| p.flux_slope * p.gamma_phi).sum();
    let slope = sxy / sxx;
    let rss: f64 = points.iter().map(|p| (p.gamma_phi - slope * p.flux_slope).powi(2)).sum();
    let slope_sigma = (rss / (n - 1) as f64 / sxx).sqrt();
    let k = LN_2.sqrt();
    Ok(FluxNoiseFit {
        sqrt_amplitude: slope / k,
        sqrt_amplitude_sigma: slope_sigma / k,
        slope,
        slope_sigma,
        n_points: n,
    })
}
