//! Ground-state dispersion of a coupler from measured flux slopes.
//!
//! Flux is in flux quanta and slopes in MHz per flux quantum, so the
//! reconstructed curve is in MHz. Integration fixes the curve only up to an
//! additive linear function of flux.

use nalgebra::{DMatrix, DVector};

use super::FitError;

fn check_grid(flux: &[f64], values: &[f64]) -> Result<(), FitError> {
    if flux.len() != values.len() {
        return Err(FitError::GridError(format!("{} grid points but {} samples", flux.len(), values.len())));
    }
    if flux.iter().any(|x| !x.is_finite()) || flux.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FitError::GridError("flux grid must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Cumulative trapezoidal integral of `slopes`, zero at the first grid point.
pub fn reconstruct_dispersion(flux: &[f64], slopes: &[f64]) -> Result<Vec<f64>, FitError> {
    check_grid(flux, slopes)?;
    let mut out = Vec::with_capacity(flux.len());
    let mut acc = 0.0;
    for i in 0..flux.len() {
        if i > 0 {
            acc += 0.5 * (slopes[i] + slopes[i - 1]) * (flux[i] - flux[i - 1]);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Subtracts the least-squares line from `values`.
pub fn remove_linear_tilt(flux: &[f64], values: &[f64]) -> Result<Vec<f64>, FitError> {
    check_grid(flux, values)?;
    if flux.len() < 2 {
        return Ok(vec![0.0; flux.len()]);
    }
    let a = DMatrix::from_fn(flux.len(), 2, |i, j| if j == 0 { 1.0 } else { flux[i] });
    let c = a
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(values), 1e-14)
        .map_err(|e| FitError::GridError(e.to_string()))?;
    Ok(flux.iter().zip(values).map(|(x, y)| y - c[0] - c[1] * x).collect())
}

/// Second-order finite-difference derivative on a possibly non-uniform grid.
pub fn differentiate(flux: &[f64], values: &[f64]) -> Result<Vec<f64>, FitError> {
    check_grid(flux, values)?;
    let n = flux.len();
    if n < 3 {
        return Err(FitError::GridError("need at least 3 points to differentiate".into()));
    }
    // derivative of the quadratic through three points, evaluated at `at`
    let quad = |i: usize, at: f64| {
        let (x0, x1, x2) = (flux[i], flux[i + 1], flux[i + 2]);
        let (y0, y1, y2) = (values[i], values[i + 1], values[i + 2]);
        y0 * (2.0 * at - x1 - x2) / ((x0 - x1) * (x0 - x2))
            + y1 * (2.0 * at - x0 - x2) / ((x1 - x0) * (x1 - x2))
            + y2 * (2.0 * at - x0 - x1) / ((x2 - x0) * (x2 - x1))
    };
    Ok((0..n)
        .map(|i| {
            let start = i.saturating_sub(1).min(n - 3);
            quad(start, flux[i])
        })
        .collect())
}
