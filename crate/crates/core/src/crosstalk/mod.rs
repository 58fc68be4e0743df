//! Linear flux crosstalk: a virtual flux-tunable device and the iterative
//! calibration that learns a voltage correction from feature positions.
//!
//! Loop fluxes follow `f = C V + f0` with `C` in flux quanta per volt. The
//! calibration works in virtual coordinates `u` with `V = M u`, so the
//! effective response is `P = C M`; a perfect correction makes `P` diagonal.

mod calibrate;
mod device;
pub mod features;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

pub use calibrate::{calibrate, CalibrationConfig, CalibrationState};
pub use device::{DeviceConfig, SweepDirection, VirtualDevice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrosstalkError {
    #[error("no feature found: {0}")]
    NoFeatureFound(String),
    #[error("correction estimate is singular at iteration {iteration}")]
    SingularCorrection { iteration: usize },
    #[error("invalid crosstalk model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("device has no coupler loop pair")]
    NoCoupler,
}

pub(crate) mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

pub(crate) mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Ground-truth linear crosstalk `f = C V + f0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct CrosstalkModel {
    #[serde(with = "serde_rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "serde_vec")]
    pub f0: DVector<f64>,
    pub labels: Vec<String>,
    /// Indices of the two coupler loops that share the 2D map, if any.
    pub coupler: Option<[usize; 2]>,
}

#[derive(Deserialize)]
struct RawModel {
    #[serde(with = "serde_rows")]
    c: DMatrix<f64>,
    #[serde(with = "serde_vec")]
    f0: DVector<f64>,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    coupler: Option<[usize; 2]>,
}

impl TryFrom<RawModel> for CrosstalkModel {
    type Error = CrosstalkError;

    fn try_from(raw: RawModel) -> Result<Self, Self::Error> {
        let n = raw.c.nrows();
        let labels = raw.labels.unwrap_or_else(|| default_labels(n, raw.coupler));
        CrosstalkModel::new(raw.c, raw.f0, labels, raw.coupler)
    }
}

pub const DEFAULT_LOOPS: usize = 5;

fn default_labels(n: usize, coupler: Option<[usize; 2]>) -> Vec<String> {
    let mut q = 0;
    (0..n)
        .map(|i| match coupler {
            Some([a, _]) if i == a => "C1".to_string(),
            Some([_, b]) if i == b => "C2".to_string(),
            _ => {
                q += 1;
                format!("QB{q}")
            }
        })
        .collect()
}

impl CrosstalkModel {
    pub fn new(
        c: DMatrix<f64>,
        f0: DVector<f64>,
        labels: Vec<String>,
        coupler: Option<[usize; 2]>,
    ) -> Result<Self, CrosstalkError> {
        let n = c.nrows();
        if n == 0 || c.ncols() != n {
            return Err(CrosstalkError::InvalidModel(format!("C must be square, got {}x{}", n, c.ncols())));
        }
        if f0.len() != n || labels.len() != n {
            return Err(CrosstalkError::InvalidModel("f0 and labels must match the size of C".into()));
        }
        if c.iter().chain(f0.iter()).any(|v| !v.is_finite()) {
            return Err(CrosstalkError::InvalidModel("entries must be finite".into()));
        }
        if (0..n).any(|i| c[(i, i)] == 0.0) {
            return Err(CrosstalkError::InvalidModel("diagonal entries must be nonzero".into()));
        }
        if let Some([a, b]) = coupler {
            if a == b || a >= n || b >= n {
                return Err(CrosstalkError::InvalidModel(format!("bad coupler pair [{a}, {b}]")));
            }
        }
        let sv = c.singular_values();
        if sv.min() <= 1e-12 * sv.max() {
            return Err(CrosstalkError::InvalidModel("C is singular".into()));
        }
        Ok(Self { c, f0, labels, coupler })
    }

    pub fn n_loops(&self) -> usize {
        self.c.nrows()
    }

    /// Loops read out through their own 1D resonator trace.
    pub fn trace_loops(&self) -> Vec<usize> {
        (0..self.n_loops()).filter(|i| !self.coupler.is_some_and(|c| c.contains(i))).collect()
    }

    /// Identity crosstalk on the default layout: three qubits then two coupler loops.
    pub fn identity(n: usize) -> Self {
        let coupler = (n >= 3).then(|| [n - 2, n - 1]);
        Self::new(DMatrix::identity(n, n), DVector::zeros(n), default_labels(n, coupler), coupler).expect("identity is valid")
    }

    /// Random crosstalk with diagonals in [0.8, 1.2] and `|C_ij / C_jj| <= max_offdiag`.
    pub fn random(n: usize, max_offdiag: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
        let c = DMatrix::from_fn(n, n, |i, j| if i == j { diag[j] } else { 0.0 });
        let mut c = c;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    c[(i, j)] = rng.gen_range(-max_offdiag..=max_offdiag) * diag[j];
                }
            }
        }
        let f0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let coupler = (n >= 3).then(|| [n - 2, n - 1]);
        Self::new(c, f0, default_labels(n, coupler), coupler).expect("random model is diagonally dominant")
    }

    /// A five-loop device with a few percent of qubit crosstalk and a
    /// strongly sheared coupler block.
    pub fn device_preset() -> Self {
        #[rustfmt::skip]
        let frac = DMatrix::from_row_slice(5, 5, &[
            1.0,    0.032, -0.011, 0.054,  0.021,
            0.041,  1.0,   0.027, -0.036,  0.062,
           -0.008,  0.045,  1.0,   0.018, -0.047,
            0.071, -0.052,  0.024, 1.0,    0.095,
            0.019,  0.066, -0.083, 0.112,  1.0,
        ]);
        let diag = [0.92, 1.05, 0.87, 1.10, 0.95];
        let c = DMatrix::from_fn(5, 5, |i, j| frac[(i, j)] * diag[j]);
        let f0 = DVector::from_vec(vec![0.13, -0.31, 0.42, 0.07, -0.22]);
        Self::new(c, f0, default_labels(5, Some([3, 4])), Some([3, 4])).expect("preset is valid")
    }

    pub fn flux(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.c * v + &self.f0
    }
}

/// Off-diagonal errors of `P = C_true M`, as `|P_ij / P_jj|` in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMetrics {
    pub mean_percent: f64,
    pub max_percent: f64,
    /// Row `i`, column `j` holds the error of loop `i` per flux quantum in loop `j`.
    pub pair_errors_percent: Vec<Vec<f64>>,
}

pub fn residual_metrics(truth: &CrosstalkModel, correction: &DMatrix<f64>) -> ResidualMetrics {
    let p = &truth.c * correction;
    let n = p.nrows();
    let mut pairs = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let e = (p[(i, j)] / p[(j, j)]).abs() * 100.0;
                pairs[i][j] = e;
                sum += e;
                max = max.max(e);
            }
        }
    }
    let count = n * (n - 1);
    ResidualMetrics {
        mean_percent: if count > 0 { sum / count as f64 } else { 0.0 },
        max_percent: max,
        pair_errors_percent: pairs,
    }
}
