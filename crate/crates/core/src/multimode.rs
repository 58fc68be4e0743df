//! Circuit-level models of qubits coupled through a tunable coupler, their
//! diagonalization, and the effective diagonal spin parameters they induce.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{solve_least_squares, EstimationError, EstimationResult, FrequencyMeasurement};
use crate::spin_model::{enumerate_transitions, BasisState, HamiltonianParams, TransitionId};

pub type CMatrix = DMatrix<Complex64>;

pub const DEFAULT_DIMENSION_CAP: usize = 4096;
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;
const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultimodeError {
    #[error("matrix `{0}` is not Hermitian")]
    NotHermitian(String),
    #[error("invalid dimension: {0}")]
    BadDimension(String),
    #[error("unknown operator `{operator}` on subsystem {subsystem}")]
    UnknownOperator { subsystem: String, operator: String },
    #[error("unknown subsystem `{0}`")]
    UnknownSubsystem(String),
    #[error("total dimension {dimension} exceeds the cap {cap}")]
    DimensionCap { dimension: usize, cap: usize },
    #[error("invalid truncation: {0}")]
    TruncationError(String),
    #[error("computational states are ambiguous: minimum overlap {min_overlap:.4}")]
    AmbiguousStates { min_overlap: f64 },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

fn real(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

fn is_hermitian(m: &CMatrix) -> bool {
    let scale = m.iter().map(|v| v.norm()).fold(1.0, f64::max);
    (m - m.adjoint()).iter().all(|v| v.norm() <= HERMITIAN_TOL * scale)
}

/// One circuit element with its bare Hamiltonian (MHz) and named coupling operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemSpec {
    pub name: String,
    pub hamiltonian: CMatrix,
    pub operators: BTreeMap<String, CMatrix>,
}

impl SubsystemSpec {
    pub fn new(
        name: impl Into<String>,
        hamiltonian: CMatrix,
        operators: BTreeMap<String, CMatrix>,
    ) -> Result<Self, MultimodeError> {
        let name = name.into();
        let d = hamiltonian.nrows();
        if d < 2 || hamiltonian.ncols() != d {
            return Err(MultimodeError::BadDimension(format!("{name}: Hamiltonian must be square with d >= 2")));
        }
        if !is_hermitian(&hamiltonian) {
            return Err(MultimodeError::NotHermitian(format!("{name}.H")));
        }
        for (op_name, op) in &operators {
            if op.shape() != (d, d) {
                return Err(MultimodeError::BadDimension(format!("{name}.{op_name} is not {d}x{d}")));
            }
            if !is_hermitian(op) {
                return Err(MultimodeError::NotHermitian(format!("{name}.{op_name}")));
            }
        }
        Ok(Self { name, hamiltonian, operators })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }

    fn operator(&self, name: &str) -> Result<&CMatrix, MultimodeError> {
        self.operators.get(name).ok_or_else(|| MultimodeError::UnknownOperator {
            subsystem: self.name.clone(),
            operator: name.to_string(),
        })
    }

    /// Applies `U . U^dagger` to the Hamiltonian and every operator.
    pub fn rotated(&self, u: &CMatrix) -> Self {
        let rot = |m: &CMatrix| u * m * u.adjoint();
        Self {
            name: self.name.clone(),
            hamiltonian: rot(&self.hamiltonian),
            operators: self.operators.iter().map(|(k, v)| (k.clone(), rot(v))).collect(),
        }
    }
}

fn pauli() -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
}

/// Two-level flux qubit in the persistent-current basis: `H = eps z + delta x`.
pub fn build_flux_qubit(name: impl Into<String>, epsilon: f64, delta: f64) -> SubsystemSpec {
    let (z, x) = pauli();
    let h = &z * epsilon + &x * delta;
    let ops = BTreeMap::from([("z".to_string(), real(&z)), ("x".to_string(), real(&x))]);
    SubsystemSpec::new(name, real(&h), ops).expect("real symmetric")
}

/// Two-level coupler with the given gap between its eigenstates.
pub fn build_coupler(name: impl Into<String>, gap: f64, epsilon: f64) -> SubsystemSpec {
    let delta = ((0.25 * gap * gap) - epsilon * epsilon).max(0.0).sqrt();
    build_flux_qubit(name, epsilon, delta)
}

/// Anharmonic oscillator truncated to `levels`, level `n` at
/// `n freq + anharmonicity n (n - 1) / 2`. Operators: `x = a + a^dagger`, `n`.
pub fn build_oscillator(name: impl Into<String>, freq: f64, anharmonicity: f64, levels: usize) -> Result<SubsystemSpec, MultimodeError> {
    if levels < 2 {
        return Err(MultimodeError::BadDimension("an oscillator needs at least 2 levels".into()));
    }
    let h = DMatrix::from_fn(levels, levels, |i, j| {
        if i == j {
            let n = i as f64;
            n * freq + 0.5 * anharmonicity * n * (n - 1.0)
        } else {
            0.0
        }
    });
    let x = DMatrix::from_fn(levels, levels, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let n = DMatrix::from_fn(levels, levels, |i, j| if i == j { i as f64 } else { 0.0 });
    let ops = BTreeMap::from([("x".to_string(), real(&x)), ("n".to_string(), real(&n))]);
    SubsystemSpec::new(name, real(&h), ops)
}

/// `strength * prod(op_k on subsystem_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingTerm {
    pub strength: f64,
    /// `(subsystem index, operator name)` factors.
    pub factors: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSystem {
    pub subsystems: Vec<SubsystemSpec>,
    pub couplings: Vec<CouplingTerm>,
}

impl CompositeSystem {
    pub fn new(subsystems: Vec<SubsystemSpec>, couplings: Vec<CouplingTerm>) -> Result<Self, MultimodeError> {
        if subsystems.is_empty() {
            return Err(MultimodeError::BadDimension("no subsystems".into()));
        }
        for term in &couplings {
            if term.factors.is_empty() || !term.strength.is_finite() {
                return Err(MultimodeError::BadDimension("coupling terms need factors and a finite strength".into()));
            }
            for (idx, op) in &term.factors {
                let s = subsystems.get(*idx).ok_or_else(|| MultimodeError::UnknownSubsystem(idx.to_string()))?;
                s.operator(op)?;
            }
        }
        Ok(Self { subsystems, couplings })
    }

    pub fn dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(SubsystemSpec::dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.name == name)
    }

    /// Assembles the Hamiltonian given per-subsystem bare blocks and an
    /// operator transform; both exact and truncated paths go through here.
    fn assemble(&self, bare: &[CMatrix], op: impl Fn(usize, &CMatrix) -> CMatrix) -> CMatrix {
        let dims: Vec<usize> = bare.iter().map(|b| b.nrows()).collect();
        let total: usize = dims.iter().product();
        let mut h = CMatrix::zeros(total, total);
        for (i, b) in bare.iter().enumerate() {
            let mut factors: Vec<Option<CMatrix>> = vec![None; dims.len()];
            factors[i] = Some(b.clone());
            h += kron_all(&dims, &factors);
        }
        for term in &self.couplings {
            let mut factors: Vec<Option<CMatrix>> = vec![None; dims.len()];
            for (idx, name) in &term.factors {
                let m = op(*idx, self.subsystems[*idx].operator(name).expect("validated"));
                factors[*idx] = Some(match factors[*idx].take() {
                    Some(prev) => prev * m,
                    None => m,
                });
            }
            h += kron_all(&dims, &factors) * Complex64::new(term.strength, 0.0);
        }
        h
    }

    pub fn hamiltonian(&self) -> CMatrix {
        let bare: Vec<CMatrix> = self.subsystems.iter().map(|s| s.hamiltonian.clone()).collect();
        self.assemble(&bare, |_, m| m.clone())
    }
}

fn kron_all(dims: &[usize], factors: &[Option<CMatrix>]) -> CMatrix {
    let mut out = CMatrix::identity(1, 1);
    for (d, f) in dims.iter().zip(factors) {
        let m = f.clone().unwrap_or_else(|| CMatrix::identity(*d, *d));
        out = out.kronecker(&m);
    }
    out
}

/// Eigen-decomposition with eigenvalues ascending; eigenvectors are columns.
fn eigh(h: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(h.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Composite spectrum with eigenvectors expressed in a product basis whose
/// factor `i` is spanned by the columns of `bases[i]` (in the subsystem's
/// original basis).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub energies: Vec<f64>,
    pub vectors: CMatrix,
    pub bases: Vec<CMatrix>,
}

pub fn exact_diagonalize(system: &CompositeSystem, cap: usize) -> Result<Spectrum, MultimodeError> {
    let dimension = system.total_dim();
    if dimension > cap {
        return Err(MultimodeError::DimensionCap { dimension, cap });
    }
    let (energies, vectors) = eigh(&system.hamiltonian());
    let bases = system.dims().iter().map(|&d| CMatrix::identity(d, d)).collect();
    Ok(Spectrum { energies, vectors, bases })
}

/// Diagonalizes each subsystem, keeps its lowest `keep[i]` eigenstates,
/// projects the couplings onto them and diagonalizes the truncated composite.
pub fn hierarchical_diagonalize(system: &CompositeSystem, keep: &[usize], cap: usize) -> Result<Spectrum, MultimodeError> {
    if keep.len() != system.subsystems.len() {
        return Err(MultimodeError::TruncationError(format!(
            "{} keep values for {} subsystems",
            keep.len(),
            system.subsystems.len()
        )));
    }
    for (s, &k) in system.subsystems.iter().zip(keep) {
        if k < 2 || k > s.dim() {
            return Err(MultimodeError::TruncationError(format!("keep {k} for {} of dimension {}", s.name, s.dim())));
        }
    }
    let dimension: usize = keep.iter().product();
    if dimension > cap {
        return Err(MultimodeError::DimensionCap { dimension, cap });
    }
    let mut bases = Vec::new();
    let mut bare = Vec::new();
    for (s, &k) in system.subsystems.iter().zip(keep) {
        let (e, v) = eigh(&s.hamiltonian);
        bases.push(v.columns(0, k).into_owned());
        bare.push(CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, e[..k].iter().map(|&x| Complex64::new(x, 0.0)))));
    }
    let h = system.assemble(&bare, |i, m| bases[i].adjoint() * m * &bases[i]);
    let (energies, vectors) = eigh(&h);
    Ok(Spectrum { energies, vectors, bases })
}

/// The eight dressed states that continue the bare computational states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveExtraction {
    /// Eigenstate index for each computational label, in `BasisState` index order.
    pub indices: [usize; 8],
    pub overlaps: [f64; 8],
    /// Energies relative to the composite ground state (MHz).
    pub energies: [f64; 8],
    pub transitions: Vec<(TransitionId, f64)>,
    pub min_overlap: f64,
}

fn bare_product_vector(system: &CompositeSystem, spectrum: &Spectrum, levels: &[usize]) -> nalgebra::DVector<Complex64> {
    let mut out = nalgebra::DVector::from_element(1, Complex64::new(1.0, 0.0));
    for (i, s) in system.subsystems.iter().enumerate() {
        let (_, v) = eigh(&s.hamiltonian);
        let coeffs = spectrum.bases[i].adjoint() * v.column(levels[i]);
        out = out.kronecker(&coeffs);
    }
    out
}

/// Greedy assignment of eigenstates to the computational labels without a
/// threshold check.
pub fn assign_computational_states(
    system: &CompositeSystem,
    spectrum: &Spectrum,
    qubits: [usize; 3],
) -> EffectiveExtraction {
    let n_sub = system.subsystems.len();
    let n_states = spectrum.energies.len();
    let mut candidates = Vec::with_capacity(8 * n_states);
    for state in BasisState::all() {
        let mut levels = vec![0; n_sub];
        for (q, &sub) in qubits.iter().enumerate() {
            levels[sub] = state.bit(q) as usize;
        }
        let bare = bare_product_vector(system, spectrum, &levels);
        let amps = spectrum.vectors.adjoint() * &bare;
        for (k, a) in amps.iter().enumerate() {
            candidates.push((state.index(), k, a.norm_sqr()));
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut indices = [usize::MAX; 8];
    let mut overlaps = [0.0; 8];
    let mut taken = vec![false; n_states];
    for (label, k, ov) in candidates {
        if indices[label] == usize::MAX && !taken[k] {
            indices[label] = k;
            overlaps[label] = ov.min(1.0);
            taken[k] = true;
        }
    }
    let e0 = spectrum.energies[0];
    let energies = indices.map(|k| spectrum.energies[k] - e0);
    let transitions = enumerate_transitions()
        .into_iter()
        .map(|t| (t, energies[t.upper().index()] - energies[t.lower().index()]))
        .collect();
    let min_overlap = overlaps.iter().copied().fold(1.0, f64::min);
    EffectiveExtraction { indices, overlaps, energies, transitions, min_overlap }
}

/// Labels the eight computational eigenstates (other subsystems in their
/// ground state) and fails when the weakest overlap falls below `threshold`.
pub fn identify_computational_states(
    system: &CompositeSystem,
    spectrum: &Spectrum,
    qubits: [usize; 3],
    threshold: f64,
) -> Result<EffectiveExtraction, MultimodeError> {
    let ex = assign_computational_states(system, spectrum, qubits);
    if ex.min_overlap < threshold {
        return Err(MultimodeError::AmbiguousStates { min_overlap: ex.min_overlap });
    }
    Ok(ex)
}

/// Least-squares fit of the diagonal spin model to the twelve transition
/// frequencies, each weighted equally.
pub fn extract_effective_params(ex: &EffectiveExtraction) -> Result<EstimationResult, MultimodeError> {
    let ms: Vec<FrequencyMeasurement> = ex.transitions.iter().map(|&(t, f)| FrequencyMeasurement::new(t, f, 1.0)).collect();
    Ok(solve_least_squares(&ms)?)
}

/// Three flux qubits at their symmetry points coupled through a two-level coupler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplerTemplate {
    pub qubit_epsilon: [f64; 3],
    pub qubit_delta: [f64; 3],
    pub coupler_epsilon: f64,
    /// Qubit-coupler `z z` strengths.
    pub coupler_coupling: [f64; 3],
    /// Direct qubit-qubit `z z` strengths for pairs (1,2), (1,3), (2,3).
    pub j_zz: [f64; 3],
    /// Direct qubit-qubit `x x` strengths.
    pub j_xx: [f64; 3],
}

impl Default for CouplerTemplate {
    fn default() -> Self {
        Self {
            qubit_epsilon: [0.0; 3],
            qubit_delta: [2707.5, 2444.0, 1439.5],
            coupler_epsilon: 0.0,
            coupler_coupling: [600.0; 3],
            j_zz: [30.0; 3],
            j_xx: [0.0; 3],
        }
    }
}

/// `|K|` at the largest gap must lie within `rel * |K_inf| + floor` of the
/// far-detuned value; the floor covers templates whose asymptote is zero.
pub const ASYMPTOTE_REL_TOL: f64 = 0.1;
pub const ASYMPTOTE_ABS_FLOOR_MHZ: f64 = 1e-3;

pub const TEMPLATE_QUBITS: [usize; 3] = [0, 1, 2];

impl CouplerTemplate {
    pub fn build(&self, gap: f64) -> CompositeSystem {
        let mut subs: Vec<SubsystemSpec> =
            (0..3).map(|i| build_flux_qubit(format!("QB{}", i + 1), self.qubit_epsilon[i], self.qubit_delta[i])).collect();
        subs.push(build_coupler("C", gap, self.coupler_epsilon));
        let mut terms = Vec::new();
        for i in 0..3 {
            terms.push(CouplingTerm { strength: self.coupler_coupling[i], factors: vec![(i, "z".into()), (3, "z".into())] });
        }
        for (k, (a, b)) in crate::spin_model::PAIRS.iter().enumerate() {
            terms.push(CouplingTerm { strength: self.j_zz[k], factors: vec![(*a, "z".into()), (*b, "z".into())] });
            terms.push(CouplingTerm { strength: self.j_xx[k], factors: vec![(*a, "x".into()), (*b, "x".into())] });
        }
        terms.retain(|t| t.strength != 0.0);
        CompositeSystem::new(subs, terms).expect("template is well formed")
    }

    /// Extraction at one coupler gap without a threshold check.
    pub fn extract(&self, gap: f64) -> Result<(EffectiveExtraction, EstimationResult), MultimodeError> {
        let sys = self.build(gap);
        let spec = exact_diagonalize(&sys, DEFAULT_DIMENSION_CAP)?;
        let ex = assign_computational_states(&sys, &spec, TEMPLATE_QUBITS);
        let est = extract_effective_params(&ex)?;
        Ok((ex, est))
    }
}

/// Default sweep from a far-detuned coupler down through 8 GHz.
pub fn default_gap_values() -> Vec<f64> {
    let mut v = vec![50_000.0, 30_000.0, 20_000.0, 15_000.0, 12_000.0, 11_000.0];
    v.extend((0..=8).map(|k| 10_000.0 - 250.0 * k as f64));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gap_mhz: f64,
    pub params: HamiltonianParams,
    pub min_overlap: f64,
    pub rms_residual_mhz: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSweep {
    pub rows: Vec<SweepRow>,
    /// Positions `i` where `|K|` at row `i + 1` is smaller than at row `i`.
    pub monotonicity_violations: Vec<usize>,
}

impl GapSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gap_mhz,omega1_mhz,omega2_mhz,omega3_mhz,j12_mhz,j13_mhz,j23_mhz,k123_mhz,min_overlap,flagged\n");
        for r in &self.rows {
            let p = r.params.to_array();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.gap_mhz, p[0], p[1], p[2], p[3], p[4], p[5], p[6], r.min_overlap, r.flagged
            );
        }
        out
    }
}

/// Effective parameters across coupler gaps, sorted descending. Rows whose
/// computational states are ambiguous are kept and flagged.
pub fn coupler_gap_sweep(template: &CouplerTemplate, gaps: &[f64], threshold: f64) -> Result<GapSweep, MultimodeError> {
    if gaps.is_empty() {
        return Err(MultimodeError::InvalidSweep("no gap values".into()));
    }
    if gaps.iter().any(|g| !(g.is_finite() && *g > 0.0)) || gaps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(MultimodeError::InvalidSweep("gaps must be positive and strictly descending".into()));
    }
    let mut rows = Vec::with_capacity(gaps.len());
    for &gap in gaps {
        let (ex, est) = template.extract(gap)?;
        rows.push(SweepRow {
            gap_mhz: gap,
            params: est.params,
            min_overlap: ex.min_overlap,
            rms_residual_mhz: est.rms_residual(),
            flagged: ex.min_overlap < threshold,
        });
    }
    let monotonicity_violations = rows
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].params.k123.abs() < w[0].params.k123.abs())
        .map(|(i, _)| i)
        .collect();
    Ok(GapSweep { rows, monotonicity_violations })
}

/// JSON description of a composite system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeFile {
    pub subsystems: Vec<SubsystemFile>,
    #[serde(default)]
    pub couplings: Vec<CouplingFile>,
    /// Names of the three subsystems that carry the computational qubits.
    pub qubits: [String; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubsystemFile {
    FluxQubit { name: String, epsilon: f64, delta: f64 },
    Coupler { name: String, gap: f64, #[serde(default)] epsilon: f64 },
    Oscillator { name: String, freq: f64, anharmonicity: f64, levels: usize },
    Matrix {
        name: String,
        hamiltonian: Vec<Vec<f64>>,
        #[serde(default)]
        hamiltonian_imag: Option<Vec<Vec<f64>>>,
        operators: BTreeMap<String, Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFile {
    pub strength: f64,
    /// `[subsystem name, operator name]` pairs.
    pub factors: Vec<[String; 2]>,
}

fn rows_to_matrix(name: &str, re: &[Vec<f64>], im: Option<&[Vec<f64>]>) -> Result<CMatrix, MultimodeError> {
    let n = re.len();
    let ok = |rows: &[Vec<f64>]| rows.len() == n && rows.iter().all(|r| r.len() == n);
    if !ok(re) || im.is_some_and(|m| !ok(m)) {
        return Err(MultimodeError::BadDimension(format!("{name}: matrix must be square")));
    }
    Ok(CMatrix::from_fn(n, n, |i, j| Complex64::new(re[i][j], im.map_or(0.0, |m| m[i][j]))))
}

impl CompositeFile {
    pub fn build(&self) -> Result<(CompositeSystem, [usize; 3]), MultimodeError> {
        let mut subs = Vec::new();
        for s in &self.subsystems {
            subs.push(match s {
                SubsystemFile::FluxQubit { name, epsilon, delta } => build_flux_qubit(name.clone(), *epsilon, *delta),
                SubsystemFile::Coupler { name, gap, epsilon } => build_coupler(name.clone(), *gap, *epsilon),
                SubsystemFile::Oscillator { name, freq, anharmonicity, levels } => {
                    build_oscillator(name.clone(), *freq, *anharmonicity, *levels)?
                }
                SubsystemFile::Matrix { name, hamiltonian, hamiltonian_imag, operators } => {
                    let h = rows_to_matrix(name, hamiltonian, hamiltonian_imag.as_deref())?;
                    let ops = operators
                        .iter()
                        .map(|(k, v)| Ok((k.clone(), rows_to_matrix(&format!("{name}.{k}"), v, None)?)))
                        .collect::<Result<_, MultimodeError>>()?;
                    SubsystemSpec::new(name.clone(), h, ops)?
                }
            });
        }
        let find = |n: &str| subs.iter().position(|s| s.name == n).ok_or_else(|| MultimodeError::UnknownSubsystem(n.into()));
        let mut terms = Vec::new();
        for c in &self.couplings {
            let factors = c.factors.iter().map(|[s, o]| Ok((find(s)?, o.clone()))).collect::<Result<_, MultimodeError>>()?;
            terms.push(CouplingTerm { strength: c.strength, factors });
        }
        let qubits = [find(&self.qubits[0])?, find(&self.qubits[1])?, find(&self.qubits[2])?];
        Ok((CompositeSystem::new(subs, terms)?, qubits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::spin_model::{energies, PAIRS};
    use rand::Rng;

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    #[test]
    fn flux_qubit_gaps() {
        for (eps, delta, gap) in [(0.0, 1250.0, 2500.0), (300.0, 400.0, 1000.0)] {
            let (e, v) = eigh(&build_flux_qubit("q", eps, delta).hamiltonian);
            assert!((e[1] - e[0] - gap).abs() < 1e-9);
            if eps == 0.0 {
                assert!((v[(0, 0)].norm_sqr() - 0.5).abs() < 1e-12);
            }
        }
        let (e, _) = eigh(&build_coupler("c", 9000.0, 0.0).hamiltonian);
        assert!((e[1] - e[0] - 9000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_subsystems() {
        let h = CMatrix::from_row_slice(2, 2, &[Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(0.0, 0.0)]);
        assert!(matches!(SubsystemSpec::new("bad", h, BTreeMap::new()), Err(MultimodeError::NotHermitian(_))));
        let one = CMatrix::identity(1, 1);
        assert!(matches!(SubsystemSpec::new("tiny", one, BTreeMap::new()), Err(MultimodeError::BadDimension(_))));
        let q = build_flux_qubit("q", 0.0, 1.0);
        let term = CouplingTerm { strength: 1.0, factors: vec![(0, "y".into())] };
        assert!(matches!(CompositeSystem::new(vec![q], vec![term]), Err(MultimodeError::UnknownOperator { .. })));
    }

    #[test]
    fn uncoupled_spectrum_is_tensor_sum() {
        let a = build_flux_qubit("a", 100.0, 700.0);
        let b = build_oscillator("b", 3000.0, -200.0, 4).unwrap();
        let (ea, _) = eigh(&a.hamiltonian);
        let (eb, _) = eigh(&b.hamiltonian);
        let sys = CompositeSystem::new(vec![a, b], vec![]).unwrap();
        let spec = exact_diagonalize(&sys, DEFAULT_DIMENSION_CAP).unwrap();
        let expect = sorted(ea.iter().flat_map(|x| eb.iter().map(move |y| x + y)).collect());
        for (x, y) in spec.energies.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-9);
        }
        let hier = hierarchical_diagonalize(&sys, &[2, 2], DEFAULT_DIMENSION_CAP).unwrap();
        for (x, y) in hier.energies.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn two_spin_analytic_spectrum() {
        // H = w1/2 z1 + w2/2 z2 + g x1 x2 splits into two 2x2 blocks
        let (w1, w2, g) = (5000.0, 4200.0, 150.0);
        let a = build_flux_qubit("a", w1 / 2.0, 0.0);
        let b = build_flux_qubit("b", w2 / 2.0, 0.0);
        let sys = CompositeSystem::new(vec![a, b], vec![CouplingTerm { strength: g, factors: vec![(0, "x".into()), (1, "x".into())] }]).unwrap();
        let spec = exact_diagonalize(&sys, DEFAULT_DIMENSION_CAP).unwrap();
        let s = ((w1 + w2) / 2.0).hypot(g);
        let d = ((w1 - w2) / 2.0).hypot(g);
        let expect = sorted(vec![-s, -d, d, s]);
        for (x, y) in spec.energies.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn spectrum_is_invariant_under_reordering() {
        let t = CouplerTemplate { j_xx: [12.0, -7.0, 5.0], ..Default::default() };
        let sys = t.build(9000.0);
        let e = exact_diagonalize(&sys, DEFAULT_DIMENSION_CAP).unwrap().energies;
        let perm = [3usize, 1, 0, 2];
        let subs: Vec<SubsystemSpec> = perm.iter().map(|&k| sys.subsystems[k].clone()).collect();
        let pos = |k: usize| perm.iter().position(|&p| p == k).unwrap();
        let terms = sys
            .couplings
            .iter()
            .map(|c| CouplingTerm { strength: c.strength, factors: c.factors.iter().map(|(i, o)| (pos(*i), o.clone())).collect() })
            .collect();
        let e2 = exact_diagonalize(&CompositeSystem::new(subs, terms).unwrap(), DEFAULT_DIMENSION_CAP).unwrap().energies;
        for (x, y) in e.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_cap_and_truncation_errors() {
        let sys = CouplerTemplate::default().build(9000.0);
        assert!(matches!(exact_diagonalize(&sys, 8), Err(MultimodeError::DimensionCap { dimension: 16, cap: 8 })));
        assert!(matches!(hierarchical_diagonalize(&sys, &[2, 2, 1, 2], 4096), Err(MultimodeError::TruncationError(_))));
        assert!(matches!(hierarchical_diagonalize(&sys, &[2, 2, 2], 4096), Err(MultimodeError::TruncationError(_))));
    }

    #[test]
    fn hierarchical_matches_exact_without_truncation() {
        let sys = CouplerTemplate { j_xx: [20.0; 3], ..Default::default() }.build(9500.0);
        let a = exact_diagonalize(&sys, 4096).unwrap().energies;
        let b = hierarchical_diagonalize(&sys, &[2, 2, 2, 2], 4096).unwrap().energies;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn coupled_oscillators_converge_with_keep() {
        let a = build_oscillator("a", 5000.0, -250.0, 10).unwrap();
        let b = build_oscillator("b", 4600.0, -300.0, 10).unwrap();
        let sys = CompositeSystem::new(vec![a, b], vec![CouplingTerm { strength: 120.0, factors: vec![(0, "x".into()), (1, "x".into())] }]).unwrap();
        let exact = exact_diagonalize(&sys, 4096).unwrap().energies;
        let mut prev = f64::INFINITY;
        for keep in 3..=8 {
            let h = hierarchical_diagonalize(&sys, &[keep, keep], 4096).unwrap().energies;
            let err = (0..4).map(|k| (h[k] - exact[k]).abs()).fold(0.0, f64::max);
            assert!(err <= prev + 1e-9, "keep {keep}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    fn random_template_system(seed: u64) -> CompositeSystem {
        let mut rng = rng_from_seed(seed);
        let mut subs: Vec<SubsystemSpec> = (0..3)
            .map(|i| build_oscillator(format!("Q{i}"), rng.gen_range(3000.0..5500.0), rng.gen_range(-400.0..-150.0), 4).unwrap())
            .collect();
        subs.push(build_coupler("C", rng.gen_range(8000.0..12000.0), 0.0));
        let mut terms: Vec<CouplingTerm> =
            (0..3).map(|i| CouplingTerm { strength: rng.gen_range(50.0..300.0), factors: vec![(i, "x".into()), (3, "z".into())] }).collect();
        for (a, b) in PAIRS {
            terms.push(CouplingTerm { strength: rng.gen_range(-30.0..30.0), factors: vec![(a, "x".into()), (b, "x".into())] });
        }
        CompositeSystem::new(subs, terms).unwrap()
    }

    #[test]
    fn hierarchical_error_non_increasing_in_keep() {
        for seed in 0..20 {
            let sys = random_template_system(seed);
            let exact = exact_diagonalize(&sys, 4096).unwrap().energies;
            let mut prev = f64::INFINITY;
            for keep in 2..=4 {
                let h = hierarchical_diagonalize(&sys, &[keep, keep, keep, 2], 4096).unwrap().energies;
                let err = (0..8).map(|k| h[k] - exact[k]).fold(0.0, f64::max);
                assert!(err >= -1e-8);
                assert!(err <= prev + 1e-8, "seed {seed} keep {keep}: {err} > {prev}");
                prev = err;
            }
            assert!(prev < 1e-8);
        }
    }

    fn random_unitary(d: usize, seed: u64) -> CMatrix {
        let mut rng = rng_from_seed(seed);
        let a = CMatrix::from_fn(d, d, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        a.qr().q()
    }

    #[test]
    fn spectrum_is_unitarily_covariant() {
        let sys = random_template_system(3);
        let e = exact_diagonalize(&sys, 4096).unwrap().energies;
        let mut subs = sys.subsystems.clone();
        subs[1] = subs[1].rotated(&random_unitary(4, 1));
        subs[3] = subs[3].rotated(&random_unitary(2, 2));
        let rotated = CompositeSystem::new(subs, sys.couplings.clone()).unwrap();
        let e2 = exact_diagonalize(&rotated, 4096).unwrap().energies;
        for (x, y) in e.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-8);
        }
        let h2 = hierarchical_diagonalize(&rotated, &[3, 3, 3, 2], 4096).unwrap().energies;
        let h = hierarchical_diagonalize(&sys, &[3, 3, 3, 2], 4096).unwrap().energies;
        for (x, y) in h.iter().zip(&h2) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    /// Diagonal spin Hamiltonian written as qubits with `z` couplings.
    fn spin_system(p: &HamiltonianParams) -> CompositeSystem {
        let subs = (0..3).map(|i| build_flux_qubit(format!("Q{i}"), -0.5 * p.omega[i], 0.0)).collect();
        let mut terms: Vec<CouplingTerm> =
            PAIRS.iter().zip(p.j).map(|((a, b), j)| CouplingTerm { strength: j, factors: vec![(*a, "z".into()), (*b, "z".into())] }).collect();
        terms.push(CouplingTerm { strength: p.k123, factors: vec![(0, "z".into()), (1, "z".into()), (2, "z".into())] });
        CompositeSystem::new(subs, terms).unwrap()
    }

    #[test]
    fn diagonal_spin_model_round_trips() {
        let p = HamiltonianParams::reference_device();
        let sys = spin_system(&p);
        let spec = exact_diagonalize(&sys, 4096).unwrap();
        let ex = identify_computational_states(&sys, &spec, [0, 1, 2], DEFAULT_OVERLAP_THRESHOLD).unwrap();
        assert!(ex.overlaps.iter().all(|&o| (o - 1.0).abs() < 1e-12));
        let est = extract_effective_params(&ex).unwrap();
        for (a, b) in est.params.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(est.residuals.iter().all(|r| r.residual_mhz.abs() <= 1e-9));
        let e = energies(&p);
        for s in BasisState::all() {
            assert!((ex.energies[s.index()] - (e[s.index()] - e[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn uncoupled_template_gives_bare_gaps() {
        let t = CouplerTemplate { coupler_coupling: [0.0; 3], j_zz: [0.0; 3], ..Default::default() };
        let (ex, est) = t.extract(9000.0).unwrap();
        assert!(ex.overlaps.iter().all(|&o| (o - 1.0).abs() < 1e-12));
        let p = est.params;
        for i in 0..3 {
            assert!((p.omega[i] - 2.0 * t.qubit_delta[i]).abs() < 1e-9);
        }
        assert!(p.j.iter().chain([&p.k123]).all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zz_only_model_matches_brute_force() {
        let mut rng = rng_from_seed(21);
        let omega: [f64; 3] = std::array::from_fn(|_| rng.gen_range(2500.0..5500.0));
        let jzz: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-50.0..50.0));
        let subs = (0..3).map(|i| build_flux_qubit(format!("Q{i}"), 0.0, omega[i] / 2.0)).collect();
        let terms = PAIRS.iter().zip(jzz).map(|((a, b), j)| CouplingTerm { strength: j, factors: vec![(*a, "z".into()), (*b, "z".into())] }).collect();
        let mut subs: Vec<SubsystemSpec> = subs;
        subs.push(build_coupler("C", 20_000.0, 0.0));
        let sys = CompositeSystem::new(subs, terms).unwrap();
        let spec = exact_diagonalize(&sys, 4096).unwrap();
        let ex = identify_computational_states(&sys, &spec, [0, 1, 2], 0.5).unwrap();
        let est = extract_effective_params(&ex).unwrap();
        // brute force: label energies directly from the 16-dim spectrum
        let e = |s: &str| ex.energies[s.parse::<BasisState>().unwrap().index()];
        let direct_omega1 = e("100") - e("000");
        let fit = crate::spin_model::transition_frequency(&est.params, "000-100".parse().unwrap());
        let lsq_residual = est.residuals.iter().find(|r| r.transition.label() == "000-100").unwrap().residual_mhz;
        assert!((fit + lsq_residual - direct_omega1).abs() < 1e-9);
        assert!(ex.min_overlap > 0.99);
    }

    #[test]
    fn weak_coupling_keeps_qubit_character() {
        let t = CouplerTemplate { coupler_coupling: [60.0; 3], ..Default::default() };
        let (ex, _) = t.extract(9000.0).unwrap();
        assert!(ex.min_overlap > 0.99, "{}", ex.min_overlap);
    }

    #[test]
    fn coupler_resonance_is_ambiguous() {
        // sweep the coupler across the dressed resonance with the lowest qubit
        let t = CouplerTemplate::default();
        let ambiguous = (0..200).map(|k| 2500.0 + 4.0 * k as f64).any(|gap| {
            let sys = t.build(gap);
            let spec = exact_diagonalize(&sys, 4096).unwrap();
            matches!(
                identify_computational_states(&sys, &spec, TEMPLATE_QUBITS, DEFAULT_OVERLAP_THRESHOLD),
                Err(MultimodeError::AmbiguousStates { .. })
            )
        });
        assert!(ambiguous);
    }

    #[test]
    fn gap_sweep_trend() {
        let t = CouplerTemplate::default();
        let gaps = default_gap_values();
        let sweep = coupler_gap_sweep(&t, &gaps, DEFAULT_OVERLAP_THRESHOLD).unwrap();
        let k = |g: f64| sweep.rows.iter().find(|r| r.gap_mhz == g).unwrap().params.k123.abs();
        assert!(k(9000.0) > k(50_000.0));
        let (_, asym) = t.extract(10.0 * gaps[0]).unwrap();
        let k_inf = asym.params.k123.abs();
        assert!((k(gaps[0]) - k_inf).abs() <= ASYMPTOTE_REL_TOL * k_inf + ASYMPTOTE_ABS_FLOOR_MHZ);
        let csv = sweep.to_csv();
        assert_eq!(csv.lines().count(), gaps.len() + 1);
        assert!(csv.starts_with("gap_mhz,omega1_mhz,omega2_mhz,omega3_mhz,j12_mhz,j13_mhz,j23_mhz,k123_mhz,min_overlap,flagged"));
        assert!(coupler_gap_sweep(&t, &[9000.0, 10000.0], 0.5).is_err());
    }

    #[test]
    fn composite_json_schema() {
        let json = r#"{
            "subsystems": [
                {"kind": "flux_qubit", "name": "QB1", "epsilon": 0, "delta": 2707.5},
                {"kind": "flux_qubit", "name": "QB2", "epsilon": 0, "delta": 2444},
                {"kind": "matrix", "name": "QB3", "hamiltonian": [[0, 1439.5], [1439.5, 0]],
                 "operators": {"z": [[1, 0], [0, -1]]}},
                {"kind": "coupler", "name": "C", "gap": 9000}
            ],
            "couplings": [
                {"strength": 600, "factors": [["QB1", "z"], ["C", "z"]]},
                {"strength": 600, "factors": [["QB2", "z"], ["C", "z"]]},
                {"strength": 600, "factors": [["QB3", "z"], ["C", "z"]]},
                {"strength": 30, "factors": [["QB1", "z"], ["QB2", "z"]]},
                {"strength": 30, "factors": [["QB1", "z"], ["QB3", "z"]]},
                {"strength": 30, "factors": [["QB2", "z"], ["QB3", "z"]]}
            ],
            "qubits": ["QB1", "QB2", "QB3"]
        }"#;
        let file: CompositeFile = serde_json::from_str(json).unwrap();
        let (sys, qubits) = file.build().unwrap();
        let spec = exact_diagonalize(&sys, 4096).unwrap();
        let ex = identify_computational_states(&sys, &spec, qubits, 0.5).unwrap();
        let (ex2, _) = CouplerTemplate::default().extract(9000.0).unwrap();
        for (a, b) in ex.energies.iter().zip(ex2.energies) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
