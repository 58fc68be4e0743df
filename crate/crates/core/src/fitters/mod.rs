//! Curve fits that turn raw traces into frequencies and noise amplitudes.

pub mod dispersion;
pub mod flux_noise;
pub mod lm;
pub mod oscillation;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dispersion::{differentiate, reconstruct_dispersion, remove_linear_tilt};
pub use flux_noise::{dephasing_rate, fit_flux_noise, DephasingPoint, FluxNoiseFit};
pub use oscillation::{
    classify_photon_order, fit_rabi, fit_ramsey, spectral_peak, transition_from_fit, OscillationGuess, PhotonOrder,
    DEFAULT_ORDER_TOLERANCE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("fit did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid grid: {0}")]
    GridError(String),
}

/// Named best-fit values with their covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi2_reduced: f64,
    pub n_iter: usize,
    pub converged: bool,
}

/// Serialized form of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: BTreeMap<String, f64>,
    pub sigmas: BTreeMap<String, f64>,
    pub names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2_reduced: f64,
    pub n_iter: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn new(
        names: Vec<String>,
        values: Vec<f64>,
        covariance: DMatrix<f64>,
        chi2_reduced: f64,
        n_iter: usize,
        converged: bool,
    ) -> Self {
        assert_eq!(names.len(), values.len());
        assert_eq!(covariance.shape(), (values.len(), values.len()));
        let sigmas = (0..values.len()).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
        Self { names, values, sigmas, covariance, chi2_reduced, n_iter, converged }
    }

    /// `(value, sigma)` for a named parameter.
    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.values[i], self.sigmas[i]))
    }

    pub fn report(&self) -> FitReport {
        let n = self.values.len();
        FitReport {
            params: self.names.iter().cloned().zip(self.values.iter().copied()).collect(),
            sigmas: self.names.iter().cloned().zip(self.sigmas.iter().copied()).collect(),
            names: self.names.clone(),
            covariance: (0..n).map(|i| (0..n).map(|j| self.covariance[(i, j)]).collect()).collect(),
            chi2_reduced: self.chi2_reduced,
            n_iter: self.n_iter,
            converged: self.converged,
        }
    }
}
