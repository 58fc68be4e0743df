//! Simulation and estimation toolkit for three flux qubits with tunable
//! two- and three-body interactions.

pub mod crosstalk;
pub mod estimator;
pub mod fitters;
pub mod multimode;
pub mod protocol;
pub mod pulse_sim;
pub mod rng;
pub mod spin_model;
