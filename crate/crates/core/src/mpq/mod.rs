//! Mixed-precision planning: per-layer cost tables (size, BOPS, latency),
//! Hessian-trace sensitivities and an exact branch-and-bound bit allocator.

mod costs;
mod ilp;
mod io;
mod pareto;
mod sensitivity;

pub use costs::{layer_costs, mac_count, BitOption, LayerCost, LayerCosts, Totals, GBOPS, MB};
pub use ilp::{brute_force, solve_ilp, BitConfig, Constraint, Constraints};
pub use io::{
    read_bit_config, read_latency_csv, read_sensitivity_json, read_traces, write_bit_config, write_sensitivity_json,
    write_traces, LatencyTable,
};
pub use pareto::{layer_profile, pareto_sweep, write_pareto_csv, write_profile_csv, LayerProfile, ParetoRow};
pub use sensitivity::{
    estimate_traces, hutchinson_samples, hutchinson_trace, perturbation, sensitivity, SensitivityRow, SensitivityTable,
    TraceNormalization,
};

use crate::graph::GraphError;
use crate::quantizer::QuantError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpqError {
    #[error("latency table has no entry for layer {layer} at {bits} bits")]
    MissingLatencyEntry { layer: String, bits: u32 },
    #[error("infeasible: {}", describe_violation(.0))]
    Infeasible(Vec<Constraint>),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("layer {layer}: {bits}-bit option is not available")]
    InvalidBits { layer: String, bits: u32 },
    #[error("invalid trace {value} for layer {layer}")]
    InvalidTrace { layer: String, value: f64 },
    #[error("no sensitivity for layer {layer} at {bits} bits")]
    MissingSensitivity { layer: String, bits: u32 },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

fn describe_violation(c: &[Constraint]) -> String {
    let names: Vec<&str> = c.iter().map(|c| c.name()).collect();
    match names.len() {
        1 => format!("the {} limit cannot be met", names[0]),
        _ => format!("the {} limits cannot be met together", names.join(" + ")),
    }
}

pub type Result<T> = std::result::Result<T, MpqError>;
