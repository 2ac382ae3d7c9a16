//! Mapping from library errors to the process exit codes.

use dyq::graph::GraphError;
use dyq::mpq::MpqError;
use dyq::quantizer::QuantError;
use dyq::tensor::TensorError;
use std::fmt;
use std::io::ErrorKind;

pub const OK: u8 = 0;
pub const INPUT: u8 = 2;
pub const NO_DATA: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const INFEASIBLE: u8 = 5;

/// A failure detected by the CLI itself rather than the library.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> anyhow::Error {
        CliError { code: INPUT, msg: msg.into() }.into()
    }

    pub fn no_data(msg: impl Into<String>) -> anyhow::Error {
        CliError { code: NO_DATA, msg: msg.into() }.into()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == ErrorKind::NotFound {
        NO_DATA
    } else {
        INPUT
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Io(io) => io_code(io),
        TensorError::NonFinite(_) => NUMERIC,
        _ => INPUT,
    }
}

fn quant_code(e: &QuantError) -> u8 {
    match e {
        QuantError::DegenerateRange { .. } | QuantError::InvalidRange { .. } => NUMERIC,
        QuantError::Tensor(t) => tensor_code(t),
        _ => INPUT,
    }
}

fn graph_code(e: &GraphError) -> u8 {
    match e {
        GraphError::NoCalibrationData => NO_DATA,
        GraphError::Io { source, .. } => io_code(source),
        GraphError::Numerical { .. } | GraphError::BiasOverflow { .. } | GraphError::Dyadic { .. } => NUMERIC,
        GraphError::Kernel { .. } if e.is_overflow() => NUMERIC,
        GraphError::Quant { source, .. } => quant_code(source),
        GraphError::Tensor(t) => tensor_code(t),
        _ => INPUT,
    }
}

fn mpq_code(e: &MpqError) -> u8 {
    match e {
        MpqError::Infeasible(_) => INFEASIBLE,
        MpqError::Io { source, .. } => io_code(source),
        MpqError::Graph(g) => graph_code(g),
        MpqError::Quant(q) => quant_code(q),
        _ => INPUT,
    }
}

/// Exit code for the first recognised error in the chain; 2 otherwise.
pub fn code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<GraphError>() {
            return graph_code(e);
        }
        if let Some(e) = cause.downcast_ref::<MpqError>() {
            return mpq_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_code(e);
        }
        if let Some(e) = cause.downcast_ref::<QuantError>() {
            return quant_code(e);
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return io_code(e);
        }
    }
    INPUT
}
