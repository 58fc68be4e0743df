pub mod crosstalk;
pub mod estimate;
pub mod fitting;
pub mod multimode;
pub mod protocol;

use serde::Serialize;
use trispin_core::spin_model::{HamiltonianParams, N_PARAMS, PARAM_NAMES};

/// Per-parameter values in MHz, serialized as `{omega1, ..., k123}`.
pub fn params_of(values: [f64; N_PARAMS]) -> HamiltonianParams {
    HamiltonianParams::from_slice(&values)
}

#[derive(Debug, Serialize)]
pub struct ParamRow {
    pub parameter: &'static str,
    pub value_mhz: f64,
    pub sigma_mhz: f64,
}

pub fn param_rows(values: [f64; N_PARAMS], sigmas: [f64; N_PARAMS]) -> Vec<ParamRow> {
    (0..N_PARAMS)
        .map(|i| ParamRow { parameter: PARAM_NAMES[i], value_mhz: values[i], sigma_mhz: sigmas[i] })
        .collect()
}

pub fn format_params(p: &HamiltonianParams) -> String {
    PARAM_NAMES
        .iter()
        .zip(p.to_array())
        .map(|(n, v)| format!("{n} = {v:.4} MHz"))
        .collect::<Vec<_>>()
        .join(", ")
}
