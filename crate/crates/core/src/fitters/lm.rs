//! Damped least squares (Levenberg-Marquardt) with analytic Jacobians.

use nalgebra::{DMatrix, DVector};

/// A scalar model `y = f(x; p)` with analytic gradient in the parameters.
pub trait CurveModel {
    fn n_params(&self) -> usize;
    fn value(&self, p: &[f64], x: f64) -> f64;
    /// Writes `df/dp` into `grad`.
    fn gradient(&self, p: &[f64], x: f64, grad: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Converged when every step component satisfies `|dp_i| <= tol (|p_i| + tol)`,
    /// or when an accepted step no longer lowers the cost measurably.
    pub rel_step_tol: f64,
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { max_iter: 200, rel_step_tol: 1e-10, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    /// `s^2 (J^T J)^+` with `s^2 = chi^2 / (n - p)`.
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub n_iter: usize,
    pub converged: bool,
}

fn residuals<M: CurveModel>(m: &M, p: &[f64], xs: &[f64], ys: &[f64]) -> DVector<f64> {
    DVector::from_iterator(xs.len(), xs.iter().zip(ys).map(|(&x, &y)| y - m.value(p, x)))
}

fn jacobian<M: CurveModel>(m: &M, p: &[f64], xs: &[f64]) -> DMatrix<f64> {
    let np = m.n_params();
    let mut jac = DMatrix::zeros(xs.len(), np);
    let mut g = vec![0.0; np];
    for (i, &x) in xs.iter().enumerate() {
        m.gradient(p, x, &mut g);
        for k in 0..np {
            jac[(i, k)] = g[k];
        }
    }
    jac
}

/// Symmetric pseudo-inverse through the eigendecomposition.
fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cut = max * 1e-13;
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| if v > cut { 1.0 / v } else { 0.0 }),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

pub fn levenberg_marquardt<M: CurveModel>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    p0: &[f64],
    config: &LmConfig,
) -> LmOutcome {
    let np = model.n_params();
    assert_eq!(p0.len(), np);
    let mut p = p0.to_vec();
    let mut r = residuals(model, &p, xs, ys);
    let mut cost = r.norm_squared();
    let y_scale = ys.iter().map(|y| y * y).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut lambda = config.initial_damping;
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < config.max_iter {
        n_iter += 1;
        let jac = jacobian(model, &p, xs);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        if cost == 0.0 || jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        // damping search: raise lambda until the step lowers the cost
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.clone().cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r_trial = residuals(model, &trial, xs, ys);
            let c_trial = r_trial.norm_squared();
            if c_trial.is_finite() && c_trial <= cost {
                let small = step
                    .iter()
                    .zip(&p)
                    .all(|(d, v)| d.abs() <= config.rel_step_tol * (v.abs() + config.rel_step_tol))
                    || cost - c_trial <= 1e-14 * cost
                    || c_trial <= 1e-30 * y_scale;
                p = trial;
                r = r_trial;
                cost = c_trial;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step exists at any damping: a stationary point to working precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let jac = jacobian(model, &p, xs);
    let dof = xs.len().saturating_sub(np);
    let s2 = if dof > 0 { cost / dof as f64 } else { 0.0 };
    let covariance = pinv_sym(&(jac.transpose() * &jac)) * s2;
    LmOutcome { params: p, covariance, chi2: cost, dof, n_iter, converged }
}
