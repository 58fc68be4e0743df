//! Diagonal three-qubit spin Hamiltonian.
//!
//! The effective model is
//!
//! ```text
//! E(s) = -1/2 * sum_i w_i s_i + sum_{i<j} J_ij s_i s_j + K s_1 s_2 s_3
//! ```
//!
//! with spin value `s = +1` for bit 0 and `s = -1` for bit 1. All energies and
//! frequencies are linear frequencies in MHz.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of qubits in the model.
pub const N_QUBITS: usize = 3;

/// Number of free parameters: three frequencies, three pair couplings, one triple coupling.
pub const N_PARAMS: usize = 7;

/// Parameter names in column order, as used in files and reports.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["omega1", "omega2", "omega3", "j12", "j13", "j23", "k123"];

/// Qubit index pairs in the order of the `j` vector: (1,2), (1,3), (2,3), zero-based.
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("basis label `{0}` must be three characters of 0/1")]
    BadState(String),
    #[error("transition `{0}` must have the form `abc-def`")]
    BadTransitionSyntax(String),
    #[error("states {0} and {1} do not differ in exactly one bit with the lower state holding 0")]
    NotSingleFlip(BasisState, BasisState),
}

/// A computational basis state `|b1 b2 b3>`, qubit 1 leftmost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisState {
    bits: [u8; N_QUBITS],
}

impl BasisState {
    pub const GROUND: BasisState = BasisState { bits: [0, 0, 0] };

    pub fn new(bits: [u8; N_QUBITS]) -> Option<Self> {
        bits.iter().all(|&b| b <= 1).then_some(Self { bits })
    }

    /// State from its index, reading the label as a binary number (qubit 1 is the MSB).
    pub fn from_index(index: usize) -> Option<Self> {
        (index < 8).then(|| Self {
            bits: [((index >> 2) & 1) as u8, ((index >> 1) & 1) as u8, (index & 1) as u8],
        })
    }

    pub fn index(self) -> usize {
        ((self.bits[0] as usize) << 2) | ((self.bits[1] as usize) << 1) | self.bits[2] as usize
    }

    pub fn all() -> impl Iterator<Item = BasisState> {
        (0..8).map(|i| Self::from_index(i).unwrap())
    }

    pub fn bits(self) -> [u8; N_QUBITS] {
        self.bits
    }

    pub fn bit(self, qubit: usize) -> u8 {
        self.bits[qubit]
    }

    /// Spin eigenvalue of qubit `qubit` (zero-based): +1 for bit 0, -1 for bit 1.
    pub fn spin(self, qubit: usize) -> f64 {
        if self.bits[qubit] == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn spins(self) -> [f64; N_QUBITS] {
        [self.spin(0), self.spin(1), self.spin(2)]
    }

    pub fn with_bit(self, qubit: usize, value: u8) -> Self {
        let mut bits = self.bits;
        bits[qubit] = value & 1;
        Self { bits }
    }

    pub fn excitations(self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn label(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BasisState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.bits[0], self.bits[1], self.bits[2])
    }
}

impl FromStr for BasisState {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.trim().as_bytes();
        if bytes.len() != N_QUBITS {
            return Err(LabelError::BadState(s.to_string()));
        }
        let mut bits = [0u8; N_QUBITS];
        for (b, c) in bits.iter_mut().zip(bytes) {
            *b = match c {
                b'0' => 0,
                b'1' => 1,
                _ => return Err(LabelError::BadState(s.to_string())),
            };
        }
        Ok(Self { bits })
    }
}

impl Serialize for BasisState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BasisState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A single-photon transition: one qubit flipped from 0 to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransitionId {
    lower: BasisState,
    flipped: usize,
}

impl TransitionId {
    pub fn new(lower: BasisState, upper: BasisState) -> Result<Self, LabelError> {
        let diff: Vec<usize> = (0..N_QUBITS).filter(|&q| lower.bit(q) != upper.bit(q)).collect();
        match diff.as_slice() {
            [q] if lower.bit(*q) == 0 => Ok(Self { lower, flipped: *q }),
            _ => Err(LabelError::NotSingleFlip(lower, upper)),
        }
    }

    /// Transition flipping qubit `qubit` (zero-based) out of `lower`; `None` if that bit is already 1.
    pub fn from_flip(lower: BasisState, qubit: usize) -> Option<Self> {
        (qubit < N_QUBITS && lower.bit(qubit) == 0).then_some(Self { lower, flipped: qubit })
    }

    pub fn lower(self) -> BasisState {
        self.lower
    }

    pub fn upper(self) -> BasisState {
        self.lower.with_bit(self.flipped, 1)
    }

    /// Zero-based index of the flipped qubit.
    pub fn flipped(self) -> usize {
        self.flipped
    }

    /// One-based qubit number, matching the QB1..QB3 naming.
    pub fn flipped_qubit(self) -> usize {
        self.flipped + 1
    }

    pub fn label(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for TransitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lower, self.upper())
    }
}

impl FromStr for TransitionId {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| LabelError::BadTransitionSyntax(s.to_string()))?;
        Self::new(a.parse()?, b.parse()?)
    }
}

impl Serialize for TransitionId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TransitionId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All 12 single-flip transitions, sorted by lower-state label then flipped qubit.
pub fn enumerate_transitions() -> Vec<TransitionId> {
    BasisState::all()
        .flat_map(|lower| (0..N_QUBITS).filter_map(move |q| TransitionId::from_flip(lower, q)))
        .collect()
}

/// Parameters of the diagonal model, in MHz.
///
/// Serialized as a flat object `{omega1, omega2, omega3, j12, j13, j23, k123}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HamiltonianParams {
    pub omega: [f64; 3],
    /// Pair couplings in the order J12, J13, J23.
    pub j: [f64; 3],
    pub k123: f64,
}

impl HamiltonianParams {
    pub const ZERO: HamiltonianParams = HamiltonianParams { omega: [0.0; 3], j: [0.0; 3], k123: 0.0 };

    pub fn new(omega: [f64; 3], j: [f64; 3], k123: f64) -> Self {
        Self { omega, j, k123 }
    }

    /// Column order (w1, w2, w3, J12, J13, J23, K123).
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [self.omega[0], self.omega[1], self.omega[2], self.j[0], self.j[1], self.j[2], self.k123]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), N_PARAMS, "parameter vector must have 7 entries");
        Self { omega: [v[0], v[1], v[2]], j: [v[3], v[4], v[5]], k123: v[6] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let a = self.to_array().map(|x| x * c);
        Self::from_slice(&a)
    }

    /// Reference parameters obtained by inverting the standard seven-transition set.
    pub fn reference_device() -> Self {
        Self {
            omega: [5415.3875, 4888.2125, 2879.4425],
            j: [-6.55125, 6.16375, 144.19625],
            k123: -4.50875,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FlatParams {
    omega1: f64,
    omega2: f64,
    omega3: f64,
    j12: f64,
    j13: f64,
    j23: f64,
    k123: f64,
}

impl Serialize for HamiltonianParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        FlatParams {
            omega1: self.omega[0],
            omega2: self.omega[1],
            omega3: self.omega[2],
            j12: self.j[0],
            j13: self.j[1],
            j23: self.j[2],
            k123: self.k123,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HamiltonianParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let p = FlatParams::deserialize(deserializer)?;
        Ok(Self::new([p.omega1, p.omega2, p.omega3], [p.j12, p.j13, p.j23], p.k123))
    }
}

/// Eigenenergy of a basis state (MHz). The Hamiltonian is diagonal, so this is exact.
pub fn energy(params: &HamiltonianParams, state: BasisState) -> f64 {
    let s = state.spins();
    let single: f64 = -0.5 * (0..N_QUBITS).map(|i| params.omega[i] * s[i]).sum::<f64>();
    let pair: f64 = PAIRS.iter().zip(params.j).map(|(&(a, b), j)| j * s[a] * s[b]).sum();
    single + pair + params.k123 * s[0] * s[1] * s[2]
}

/// All eight eigenenergies, indexed by [`BasisState::index`].
pub fn energies(params: &HamiltonianParams) -> [f64; 8] {
    let mut e = [0.0; 8];
    for st in BasisState::all() {
        e[st.index()] = energy(params, st);
    }
    e
}

/// Frequency of a transition, `E(upper) - E(lower)`, evaluated in closed form.
///
/// Flipping qubit k out of a state with spins s gives
/// `w_k - 2 sum_{j != k} J_kj s_j - 2 K prod_{j != k} s_j`.
pub fn transition_frequency(params: &HamiltonianParams, t: TransitionId) -> f64 {
    let k = t.flipped();
    let s = t.lower().spins();
    let mut f = params.omega[k];
    let mut others = 1.0;
    for (&(a, b), j) in PAIRS.iter().zip(params.j) {
        if a == k {
            f -= 2.0 * j * s[b];
        } else if b == k {
            f -= 2.0 * j * s[a];
        }
    }
    for (q, sq) in s.iter().enumerate() {
        if q != k {
            others *= sq;
        }
    }
    f - 2.0 * params.k123 * others
}

/// Frequencies for every transition in `ts`.
pub fn transition_frequencies(params: &HamiltonianParams, ts: &[TransitionId]) -> Vec<f64> {
    ts.iter().map(|&t| transition_frequency(params, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tr(s: &str) -> TransitionId {
        s.parse().unwrap()
    }

    #[test]
    fn zero_params_give_zero_everything() {
        let p = HamiltonianParams::ZERO;
        for st in BasisState::all() {
            assert_eq!(energy(&p, st), 0.0);
        }
        for t in enumerate_transitions() {
            assert_eq!(transition_frequency(&p, t), 0.0);
        }
    }

    #[test]
    fn single_free_spin() {
        let p = HamiltonianParams::new([2000.0, 0.0, 0.0], [0.0; 3], 0.0);
        assert_eq!(energy(&p, "000".parse().unwrap()), -1000.0);
        assert_eq!(energy(&p, "100".parse().unwrap()), 1000.0);
    }

    #[test]
    fn reference_ground_energy() {
        let e = energy(&HamiltonianParams::reference_device(), BasisState::GROUND);
        assert_relative_eq!(e, -6452.22125, epsilon = 1e-9);
    }

    #[test]
    fn reference_transition_frequencies() {
        let p = HamiltonianParams::reference_device();
        assert_relative_eq!(transition_frequency(&p, tr("000-001")), 2587.74, epsilon = 1e-9);
        assert_relative_eq!(transition_frequency(&p, tr("001-011")), 5180.69, epsilon = 1e-9);
        assert_relative_eq!(transition_frequency(&p, tr("010-011")), 3146.49, epsilon = 1e-9);
    }

    #[test]
    fn transitions_enumerated_canonically() {
        let ts = enumerate_transitions();
        assert_eq!(ts.len(), 12);
        let labels: Vec<String> = ts.iter().map(|t| t.label()).collect();
        assert_eq!(labels[0], "000-100");
        assert_eq!(labels[1], "000-010");
        assert_eq!(labels[2], "000-001");
        assert_eq!(labels.last().unwrap(), "110-111");
        assert_eq!(tr("000-100").flipped_qubit(), 1);
        assert_eq!(tr("110-111").flipped_qubit(), 3);
        let mut uniq = labels.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 12);
    }

    #[test]
    fn label_round_trip_and_rejects() {
        for st in BasisState::all() {
            assert_eq!(st.label().parse::<BasisState>().unwrap(), st);
        }
        assert!("0a1".parse::<BasisState>().is_err());
        assert!("0000".parse::<BasisState>().is_err());
        assert!("000-011".parse::<TransitionId>().is_err());
        assert!("100-000".parse::<TransitionId>().is_err());
        assert!("000100".parse::<TransitionId>().is_err());
    }

    #[test]
    fn params_json_is_flat() {
        let p = HamiltonianParams::reference_device();
        let v = serde_json::to_value(p).unwrap();
        assert_eq!(v["j23"], 144.19625);
        assert_eq!(v.as_object().unwrap().len(), 7);
        let back: HamiltonianParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    fn arb_params() -> impl Strategy<Value = HamiltonianParams> {
        (prop::array::uniform7(-6000.0f64..6000.0)).prop_map(|a| HamiltonianParams::from_slice(&a))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn closed_form_matches_energy_difference(p in arb_params()) {
            for t in enumerate_transitions() {
                let direct = energy(&p, t.upper()) - energy(&p, t.lower());
                let closed = transition_frequency(&p, t);
                // relative to the magnitude of the terms being summed
                let scale: f64 = p.to_array().iter().map(|x| x.abs()).sum();
                prop_assert!((direct - closed).abs() <= 1e-12 * scale.max(1.0));
            }
        }

        #[test]
        fn face_sum_rule(p in arb_params()) {
            // every face of the cube: fix one qubit's bit, the other two span a square
            for fixed in 0..3 {
                for v in 0..2u8 {
                    let (a, b) = match fixed { 0 => (1, 2), 1 => (0, 2), _ => (0, 1) };
                    let base = BasisState::GROUND.with_bit(fixed, v);
                    let via_b = transition_frequency(&p, TransitionId::from_flip(base, b).unwrap())
                        + transition_frequency(&p, TransitionId::from_flip(base.with_bit(b, 1), a).unwrap());
                    let via_a = transition_frequency(&p, TransitionId::from_flip(base, a).unwrap())
                        + transition_frequency(&p, TransitionId::from_flip(base.with_bit(a, 1), b).unwrap());
                    let scale = via_a.abs().max(via_b.abs()).max(1.0);
                    prop_assert!((via_a - via_b).abs() <= 1e-9 * scale);
                }
            }
        }

        #[test]
        fn omega_sign_flip_negates_only_omega_part(p in arb_params()) {
            let mut flipped = p;
            flipped.omega = p.omega.map(|w| -w);
            for t in enumerate_transitions() {
                let coupling_part = transition_frequency(&p, t) - p.omega[t.flipped()];
                let f2 = transition_frequency(&flipped, t);
                prop_assert!((f2 - (coupling_part - p.omega[t.flipped()])).abs() < 1e-9);
            }
        }
    }
}
