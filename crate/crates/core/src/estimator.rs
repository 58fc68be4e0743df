//! Linear inversion of transition frequencies into Hamiltonian parameters.
//!
//! Every transition frequency of the diagonal model is an integer combination
//! of the seven parameters, so a set of transitions defines an integer design
//! matrix. Seven transitions with an invertible design matrix determine the
//! parameters exactly; more transitions are combined by weighted least squares.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spin_model::{
    enumerate_transitions, BasisState, HamiltonianParams, TransitionId, N_PARAMS, PAIRS,
};

pub type ParamVector = SVector<f64, N_PARAMS>;
pub type ParamMatrix = SMatrix<f64, N_PARAMS, N_PARAMS>;

/// Integer coefficient row, column order (w1, w2, w3, J12, J13, J23, K123).
pub type DesignRow = [i64; N_PARAMS];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("design matrix has rank {rank} < 7 (condition number {condition_number:.3e}); the transition set is incomplete")]
    SingularDesign { rank: usize, condition_number: f64 },
    #[error("expected {expected} measurements, got {got}")]
    WrongCount { expected: String, got: usize },
    #[error("measurement for {transition} is invalid: {reason}")]
    InvalidMeasurement { transition: TransitionId, reason: String },
    #[error("transition {0} is missing from the measurement set")]
    MissingTransition(TransitionId),
    #[error("transition {0} appears more than once")]
    DuplicateTransition(TransitionId),
}

/// A measured transition frequency with its one-sigma uncertainty, both in MHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyMeasurement {
    pub transition: TransitionId,
    pub value: f64,
    pub sigma: f64,
}

impl FrequencyMeasurement {
    pub fn new(transition: TransitionId, value: f64, sigma: f64) -> Self {
        Self { transition, value, sigma }
    }

    fn validate(&self) -> Result<(), EstimationError> {
        let bad = |reason: &str| EstimationError::InvalidMeasurement {
            transition: self.transition,
            reason: reason.to_string(),
        };
        if !self.value.is_finite() {
            return Err(bad("value is not finite"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(bad("sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// File form: `{lower, upper, value_mhz|value_ghz, sigma_mhz|sigma_ghz}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub lower: BasisState,
    pub upper: BasisState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_ghz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_mhz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_ghz: Option<f64>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Label(#[from] crate::spin_model::LabelError),
    #[error("{field}: exactly one of `{field}_mhz` / `{field}_ghz` must be given")]
    Unit { field: &'static str },
}

fn pick_unit(mhz: Option<f64>, ghz: Option<f64>, field: &'static str) -> Result<f64, RecordError> {
    match (mhz, ghz) {
        (Some(v), None) => Ok(v),
        (None, Some(v)) => Ok(v * 1e3),
        _ => Err(RecordError::Unit { field }),
    }
}

impl MeasurementRecord {
    pub fn to_measurement(&self) -> Result<FrequencyMeasurement, RecordError> {
        let transition = TransitionId::new(self.lower, self.upper)?;
        let value = pick_unit(self.value_mhz, self.value_ghz, "value")?;
        let sigma = pick_unit(self.sigma_mhz, self.sigma_ghz, "sigma")?;
        Ok(FrequencyMeasurement { transition, value, sigma })
    }
}

impl From<&FrequencyMeasurement> for MeasurementRecord {
    fn from(m: &FrequencyMeasurement) -> Self {
        Self {
            lower: m.transition.lower(),
            upper: m.transition.upper(),
            value_mhz: Some(m.value),
            value_ghz: None,
            sigma_mhz: Some(m.sigma),
            sigma_ghz: None,
        }
    }
}

/// Coefficients of `transition_frequency` in the seven parameters.
///
/// 1 on the flipped qubit's frequency, `-2 s_j` on each coupling to a
/// non-flipped qubit j (spin taken in the lower state), and `-2 s_a s_b` on the
/// three-body term.
pub fn design_row(t: TransitionId) -> DesignRow {
    let k = t.flipped();
    let s = t.lower().bits().map(|b| if b == 0 { 1i64 } else { -1 });
    let mut row = [0i64; N_PARAMS];
    row[k] = 1;
    let mut others = 1;
    for (p, &(a, b)) in PAIRS.iter().enumerate() {
        if a == k {
            row[3 + p] = -2 * s[b];
        } else if b == k {
            row[3 + p] = -2 * s[a];
        }
    }
    for (q, sq) in s.iter().enumerate() {
        if q != k {
            others *= sq;
        }
    }
    row[6] = -2 * others;
    row
}

/// The seven transitions used as the standard minimal set: the three
/// single-qubit excitations from the ground state plus four higher-lying ones.
pub fn standard_set() -> [TransitionId; 7] {
    ["000-001", "000-010", "000-100", "001-011", "100-101", "100-110", "110-111"]
        .map(|s| s.parse().expect("static label"))
}

/// Which version of the standard set's coefficient matrix to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowVariant {
    /// Rows derived from the model; the only variant used for estimation.
    Derived,
    /// Row six (`100-110`) replaced by `[0, 1, 0, 2, -2, 2, 0]`, a circulated
    /// version that contradicts the reference frequencies. Kept for comparison.
    MisprintedRowSix,
}

pub const MISPRINTED_ROW_SIX: DesignRow = [0, 1, 0, 2, -2, 2, 0];

/// Design matrix of a list of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub transitions: Vec<TransitionId>,
    pub rows: Vec<DesignRow>,
}

impl DesignMatrix {
    pub fn new(transitions: &[TransitionId]) -> Self {
        Self { transitions: transitions.to_vec(), rows: transitions.iter().map(|&t| design_row(t)).collect() }
    }

    pub fn standard(variant: RowVariant) -> Self {
        let mut m = Self::new(&standard_set());
        if variant == RowVariant::MisprintedRowSix {
            m.rows[5] = MISPRINTED_ROW_SIX;
        }
        m
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), N_PARAMS, |i, j| self.rows[i][j] as f64)
    }

    /// Exact rank by integer elimination.
    pub fn rank(&self) -> usize {
        integer_rank(&self.rows)
    }

    /// Ratio of largest to smallest singular value (infinite when rank-deficient).
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.to_matrix())
    }

    /// `A p` for a parameter set.
    pub fn apply(&self, params: &HamiltonianParams) -> Vec<f64> {
        let p = params.to_array();
        self.rows.iter().map(|r| r.iter().zip(p).map(|(&a, x)| a as f64 * x).sum()).collect()
    }
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= max * 1e-14 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rank of an integer matrix by fraction-free elimination.
///
/// Rows are cross-multiplied and then divided by their content, so all
/// arithmetic stays exact and bounded.
pub fn integer_rank<const N: usize>(rows: &[[i64; N]]) -> usize {
    let mut a: Vec<[i128; N]> = rows.iter().map(|r| r.map(i128::from)).collect();
    let m = a.len();
    let mut rank = 0;
    for col in 0..N {
        if rank == m {
            break;
        }
        let Some(p) = (rank..m).find(|&i| a[i][col] != 0) else { continue };
        a.swap(rank, p);
        let pivot_row = a[rank];
        for row in a.iter_mut().skip(rank + 1) {
            let f = row[col];
            if f == 0 {
                continue;
            }
            let mut content = 0;
            for j in 0..N {
                row[j] = pivot_row[col] * row[j] - f * pivot_row[j];
                content = gcd(content, row[j]);
            }
            if content > 1 {
                for v in row.iter_mut() {
                    *v /= content;
                }
            }
        }
        rank += 1;
    }
    rank
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMethod {
    Exact7,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub transition: TransitionId,
    pub residual_mhz: f64,
}

/// Parameters with their covariance (MHz^2) and per-transition residuals
/// (measured minus model, MHz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub params: HamiltonianParams,
    pub covariance: ParamMatrix,
    pub residuals: Vec<Residual>,
    pub method: EstimationMethod,
    pub condition_number: f64,
}

impl EstimationResult {
    /// One-sigma uncertainties, square roots of the covariance diagonal.
    pub fn sigmas(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|i| self.covariance[(i, i)].max(0.0).sqrt())
    }

    /// Weighted sum of squared residuals is not stored; this is the plain RMS.
    pub fn rms_residual(&self) -> f64 {
        if self.residuals.is_empty() {
            return 0.0;
        }
        let s: f64 = self.residuals.iter().map(|r| r.residual_mhz.powi(2)).sum();
        (s / self.residuals.len() as f64).sqrt()
    }
}

fn check_rank(design: &DesignMatrix) -> Result<(), EstimationError> {
    let rank = design.rank();
    if rank < N_PARAMS {
        return Err(EstimationError::SingularDesign { rank, condition_number: design.condition_number() });
    }
    Ok(())
}

/// Invert exactly seven measurements.
///
/// Covariance is `A^-1 diag(sigma^2) A^-T`. Residuals of the square system are zero.
pub fn solve_exact(measurements: &[FrequencyMeasurement]) -> Result<EstimationResult, EstimationError> {
    if measurements.len() != N_PARAMS {
        return Err(EstimationError::WrongCount { expected: "exactly 7".into(), got: measurements.len() });
    }
    for m in measurements {
        m.validate()?;
    }
    let transitions: Vec<TransitionId> = measurements.iter().map(|m| m.transition).collect();
    let design = DesignMatrix::new(&transitions);
    check_rank(&design)?;
    let a = ParamMatrix::from_fn(|i, j| design.rows[i][j] as f64);
    let f = ParamVector::from_fn(|i, _| measurements[i].value);
    let lu = a.lu();
    let p = lu.solve(&f).expect("full-rank design");
    let a_inv = lu.try_inverse().expect("full-rank design");
    let var = ParamMatrix::from_diagonal(&ParamVector::from_fn(|i, _| measurements[i].sigma.powi(2)));
    let cov = a_inv * var * a_inv.transpose();
    Ok(EstimationResult {
        params: HamiltonianParams::from_slice(p.as_slice()),
        covariance: symmetrize(cov),
        residuals: transitions.iter().map(|&t| Residual { transition: t, residual_mhz: 0.0 }).collect(),
        method: EstimationMethod::Exact7,
        condition_number: design.condition_number(),
    })
}

fn symmetrize(c: ParamMatrix) -> ParamMatrix {
    (c + c.transpose()) * 0.5
}

/// Weighted least squares over seven or more measurements, weights `1/sigma^2`.
///
/// Covariance is `(A^T W A)^-1`.
pub fn solve_least_squares(measurements: &[FrequencyMeasurement]) -> Result<EstimationResult, EstimationError> {
    if measurements.len() < N_PARAMS {
        return Err(EstimationError::WrongCount { expected: "at least 7".into(), got: measurements.len() });
    }
    for m in measurements {
        m.validate()?;
        if m.sigma <= 0.0 {
            return Err(EstimationError::InvalidMeasurement {
                transition: m.transition,
                reason: "least squares needs sigma > 0".into(),
            });
        }
    }
    let transitions: Vec<TransitionId> = measurements.iter().map(|m| m.transition).collect();
    let design = DesignMatrix::new(&transitions);
    check_rank(&design)?;
    let n = measurements.len();
    let a = design.to_matrix();
    let aw = DMatrix::from_fn(n, N_PARAMS, |i, j| a[(i, j)] / measurements[i].sigma);
    let fw = DVector::from_fn(n, |i, _| measurements[i].value / measurements[i].sigma);
    // QR on the whitened system avoids squaring the condition number.
    let qr = aw.clone().qr();
    let qtf = qr.q().transpose() * &fw;
    let r = qr.r();
    let p = r
        .solve_upper_triangular(&qtf)
        .expect("full-rank design has nonsingular R");
    let r_inv = r.try_inverse().expect("full-rank design has nonsingular R");
    let cov_d = &r_inv * r_inv.transpose();
    let cov = ParamMatrix::from_fn(|i, j| cov_d[(i, j)]);
    let params = HamiltonianParams::from_slice(p.as_slice());
    let predicted = design.apply(&params);
    let residuals = measurements
        .iter()
        .zip(predicted)
        .map(|(m, f)| Residual { transition: m.transition, residual_mhz: m.value - f })
        .collect();
    Ok(EstimationResult {
        params,
        covariance: symmetrize(cov),
        residuals,
        method: EstimationMethod::LeastSquares,
        condition_number: condition_number(&a),
    })
}

/// Result of testing one seven-element subset of the 12 transitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetInfo {
    /// Indices into [`enumerate_transitions`].
    pub indices: [usize; 7],
    pub full_rank: bool,
    /// Every one of the eight basis states is an endpoint of some transition.
    pub covers_all_states: bool,
}

impl SubsetInfo {
    pub fn transitions(&self) -> [TransitionId; 7] {
        let all = enumerate_transitions();
        self.indices.map(|i| all[i])
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else { break };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

/// Tests all C(12,7) = 792 subsets for invertibility and state coverage.
pub fn scan_subsets() -> Vec<SubsetInfo> {
    let all = enumerate_transitions();
    let rows: Vec<DesignRow> = all.iter().map(|&t| design_row(t)).collect();
    combinations(all.len(), N_PARAMS)
        .into_iter()
        .map(|c| {
            let indices: [usize; 7] = c.try_into().unwrap();
            let sub: Vec<DesignRow> = indices.iter().map(|&i| rows[i]).collect();
            let mut seen = [false; 8];
            for &i in &indices {
                seen[all[i].lower().index()] = true;
                seen[all[i].upper().index()] = true;
            }
            SubsetInfo {
                indices,
                full_rank: integer_rank(&sub) == N_PARAMS,
                covers_all_states: seen.iter().all(|&s| s),
            }
        })
        .collect()
}

/// The seven-transition subsets with invertible design matrix, in
/// lexicographic order of their indices into [`enumerate_transitions`].
pub fn complete_subsets() -> &'static [[usize; 7]] {
    static CACHE: OnceLock<Vec<[usize; 7]>> = OnceLock::new();
    CACHE.get_or_init(|| scan_subsets().into_iter().filter(|s| s.full_rank).map(|s| s.indices).collect())
}

/// Parameters recovered from every complete subset, plus their spread.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScan {
    /// One entry per complete subset, same order as [`complete_subsets`].
    pub draws: Vec<([usize; 7], HamiltonianParams)>,
    pub mean: [f64; N_PARAMS],
    /// Sample standard deviation over subsets (MHz).
    pub std_dev: [f64; N_PARAMS],
}

impl SelectionScan {
    /// CSV with one row per subset: the seven transition labels, then the parameters.
    pub fn to_csv(&self) -> String {
        let all = enumerate_transitions();
        let mut s = String::from("subset,omega1_mhz,omega2_mhz,omega3_mhz,j12_mhz,j13_mhz,j23_mhz,k123_mhz\n");
        for (idx, p) in &self.draws {
            let labels: Vec<String> = idx.iter().map(|&i| all[i].label()).collect();
            s.push_str(&labels.join(" "));
            for v in p.to_array() {
                s.push_str(&format!(",{v:.9}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Maps each of the 12 transitions to its measurement; errors on gaps or duplicates.
fn index_full_set(measurements: &[FrequencyMeasurement]) -> Result<Vec<FrequencyMeasurement>, EstimationError> {
    let mut by_t: HashMap<TransitionId, FrequencyMeasurement> = HashMap::new();
    for m in measurements {
        m.validate()?;
        if by_t.insert(m.transition, *m).is_some() {
            return Err(EstimationError::DuplicateTransition(m.transition));
        }
    }
    enumerate_transitions()
        .into_iter()
        .map(|t| by_t.get(&t).copied().ok_or(EstimationError::MissingTransition(t)))
        .collect()
}

/// Spread of the exact solution across all complete seven-transition subsets.
pub fn selection_scan(measurements: &[FrequencyMeasurement]) -> Result<SelectionScan, EstimationError> {
    if measurements.len() != 12 {
        return Err(EstimationError::WrongCount { expected: "all 12".into(), got: measurements.len() });
    }
    let full = index_full_set(measurements)?;
    let subsets = complete_subsets();
    if subsets.is_empty() {
        return Err(EstimationError::SingularDesign { rank: 0, condition_number: f64::INFINITY });
    }
    let mut draws = Vec::with_capacity(subsets.len());
    for idx in subsets {
        let ms: Vec<FrequencyMeasurement> = idx.iter().map(|&i| full[i]).collect();
        draws.push((*idx, solve_exact(&ms)?.params));
    }
    let n = draws.len() as f64;
    let mut mean = [0.0; N_PARAMS];
    for (_, p) in &draws {
        for (m, v) in mean.iter_mut().zip(p.to_array()) {
            *m += v / n;
        }
    }
    let mut std_dev = [0.0; N_PARAMS];
    if draws.len() > 1 {
        for (_, p) in &draws {
            for ((s, v), m) in std_dev.iter_mut().zip(p.to_array()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        for s in &mut std_dev {
            *s = (*s / (n - 1.0)).sqrt();
        }
    }
    Ok(SelectionScan { draws, mean, std_dev })
}

/// Per-parameter selection error (MHz).
pub fn selection_error(measurements: &[FrequencyMeasurement]) -> Result<[f64; N_PARAMS], EstimationError> {
    Ok(selection_scan(measurements)?.std_dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub transition: TransitionId,
    pub value_mhz: f64,
    pub sigma_mhz: f64,
}

/// Predicts transitions from fitted parameters; sigma from `r^T C r`.
pub fn predict_remaining(result: &EstimationResult, held_out: &[TransitionId]) -> Vec<Prediction> {
    held_out
        .iter()
        .map(|&t| {
            let r = ParamVector::from_iterator(design_row(t).iter().map(|&c| c as f64));
            let value = r.dot(&ParamVector::from_row_slice(&result.params.to_array()));
            let var = (r.transpose() * result.covariance * r)[(0, 0)];
            Prediction { transition: t, value_mhz: value, sigma_mhz: var.max(0.0).sqrt() }
        })
        .collect()
}

/// Noiseless measurements of `ts` generated from `params`, all with the same sigma.
pub fn synthesize(params: &HamiltonianParams, ts: &[TransitionId], sigma: f64) -> Vec<FrequencyMeasurement> {
    ts.iter()
        .map(|&t| FrequencyMeasurement::new(t, crate::spin_model::transition_frequency(params, t), sigma))
        .collect()
}
