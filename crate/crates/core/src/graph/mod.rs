//! Model topology, float models, BN folding, quantized graphs and the two
//! executors (integer-only and simulated) with divergence measurement.

mod calibrate;
mod divergence;
mod exec;
mod float_ops;
mod fold;
mod manifest;
mod model;
mod quant;

pub use calibrate::{calibrate, load_calibration, save_calibration, Calibration};
pub use divergence::{measure_divergence, DivergenceReport, SiteDivergence};
pub use exec::{infer_fake, infer_true, Inference};
pub use fold::{fold_bn, BN_EPSILON};
pub use manifest::{load_manifest, save_manifest, MANIFEST_FORMAT};
pub use model::{forward_float, load_model, load_topology, save_model, BatchNorm, FloatModel, LayerParams};
pub use quant::{build_quant_graph, site_bits, uniform_bits, QuantGraph, QuantLinear, QuantNode, QuantOp};

use crate::dyadic::DyadicError;
use crate::kernels::{ConvSpec, KernelError, PoolKind, PoolSpec};
use crate::quantizer::QuantError;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid parameters for layer {layer}: {msg}")]
    Params { layer: String, msg: String },
    #[error("batch-norm std {std} of layer {layer} channel {channel} is not above epsilon")]
    Numerical { layer: String, channel: usize, std: f32 },
    #[error("model still contains batch-norm on layer {0}; fold it first")]
    NotFolded(String),
    #[error("no calibration range for activation site {0}")]
    MissingCalibration(String),
    #[error("no calibration batches")]
    NoCalibrationData,
    #[error("no bit-width assigned to layer {0}")]
    MissingBits(String),
    #[error("quantized bias of layer {layer} channel {channel} does not fit in INT32")]
    BiasOverflow { layer: String, channel: usize },
    #[error("input shape {got:?} does not match the model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("site {site}: {source}")]
    Quant { site: String, source: QuantError },
    #[error("rescale on {site}: {source}")]
    Dyadic { site: String, source: DyadicError },
    #[error("layer {layer}: {source}")]
    Kernel { layer: String, source: KernelError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl GraphError {
    /// True when the failure is an INT32 accumulator overflow.
    pub fn is_overflow(&self) -> bool {
        matches!(self, GraphError::Kernel { source: KernelError::AccumulatorOverflow, .. })
    }
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// One layer of a topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input {
        shape: Vec<usize>,
    },
    Conv {
        input: String,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        batch_norm: bool,
    },
    /// Fully connected; rank-4 inputs are flattened per sample.
    Fc {
        input: String,
        out_features: usize,
        #[serde(default)]
        bias: bool,
    },
    Relu {
        input: String,
    },
    MaxPool {
        input: String,
        window: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    AvgPool {
        input: String,
        window: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// Residual addition of the main branch and the skip connection.
    ResidualAdd {
        main: String,
        skip: String,
    },
    /// Channel-axis concatenation.
    Concat {
        inputs: Vec<String>,
    },
}

fn one() -> usize {
    1
}

impl Op {
    pub fn inputs(&self) -> Vec<&str> {
        match self {
            Op::Input { .. } => vec![],
            Op::Conv { input, .. }
            | Op::Fc { input, .. }
            | Op::Relu { input }
            | Op::MaxPool { input, .. }
            | Op::AvgPool { input, .. } => vec![input.as_str()],
            Op::ResidualAdd { main, skip } => vec![main.as_str(), skip.as_str()],
            Op::Concat { inputs } => inputs.iter().map(String::as_str).collect(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Op::Conv { .. } | Op::Fc { .. })
    }

    pub fn pool_spec(&self) -> Option<PoolSpec> {
        match *self {
            Op::MaxPool { window, stride, padding, .. } => {
                Some(PoolSpec { kind: PoolKind::Max, window, stride, padding })
            }
            Op::AvgPool { window, stride, padding, .. } => {
                Some(PoolSpec { kind: PoolKind::Avg, window, stride, padding })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
}

/// Layer DAG listed in execution order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub nodes: Vec<Node>,
}

/// Structural facts derived from a validated topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Output shape of every node.
    pub shapes: Vec<Vec<usize>>,
    /// Producer indices of every node.
    pub inputs: Vec<Vec<usize>>,
    /// Consumer indices of every node.
    pub consumers: Vec<Vec<usize>>,
    pub input: usize,
    pub output: usize,
}

impl Topology {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Indices of conv and fc layers in execution order.
    pub fn linear_layers(&self) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.op.is_linear()).map(|(i, _)| i).collect()
    }

    /// Validates the DAG and infers every node's output shape.
    pub fn analyze(&self) -> Result<Analysis> {
        let err = |m: String| Err(GraphError::Topology(m));
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        let mut inputs = Vec::with_capacity(self.nodes.len());
        let mut consumers = vec![Vec::new(); self.nodes.len()];
        let mut input_node = None;

        for (i, node) in self.nodes.iter().enumerate() {
            if index.insert(node.name.as_str(), i).is_some() {
                return err(format!("duplicate node name {}", node.name));
            }
            let mut ins = Vec::new();
            for src in node.op.inputs() {
                match index.get(src) {
                    Some(&j) if j != i => ins.push(j),
                    _ => return err(format!("{} reads {src}, which is not an earlier node", node.name)),
                }
            }
            for &j in &ins {
                consumers[j].push(i);
            }
            let shape = self.infer_shape(node, &ins, &shapes)?;
            if shape.contains(&0) {
                return err(format!("{} has an empty output {:?}", node.name, shape));
            }
            if let Op::Input { .. } = node.op {
                if input_node.replace(i).is_some() {
                    return err("more than one input node".into());
                }
            }
            shapes.push(shape);
            inputs.push(ins);
        }
        let input = match input_node {
            Some(i) => i,
            None => return err("no input node".into()),
        };
        let outputs: Vec<usize> = (0..self.nodes.len()).filter(|&i| consumers[i].is_empty()).collect();
        if outputs.len() != 1 {
            let names: Vec<&str> = outputs.iter().map(|&i| self.nodes[i].name.as_str()).collect();
            return err(format!("expected a single output, found {:?}", names));
        }
        Ok(Analysis { shapes, inputs, consumers, input, output: outputs[0] })
    }

    fn infer_shape(&self, node: &Node, ins: &[usize], shapes: &[Vec<usize>]) -> Result<Vec<usize>> {
        let err = |m: String| Err(GraphError::Topology(format!("{}: {m}", node.name)));
        let src = |k: usize| &shapes[ins[k]];
        match &node.op {
            Op::Input { shape } => {
                if !matches!(shape.len(), 2 | 4) {
                    return err(format!("input must be [N, F] or [N, C, H, W], got {:?}", shape));
                }
                Ok(shape.clone())
            }
            Op::Conv { .. } => {
                let s = src(0);
                if s.len() != 4 {
                    return err(format!("conv needs a rank-4 input, got {:?}", s));
                }
                let spec = self.conv_spec(node, s).expect("conv");
                match spec.output_hw(s[2], s[3]) {
                    Ok((oh, ow)) => Ok(vec![s[0], spec.out_channels, oh, ow]),
                    Err(e) => err(e.to_string()),
                }
            }
            Op::Fc { out_features, .. } => {
                let s = src(0);
                Ok(vec![s[0], *out_features])
            }
            Op::Relu { .. } => Ok(src(0).clone()),
            Op::MaxPool { .. } | Op::AvgPool { .. } => {
                let s = src(0);
                let p = node.op.pool_spec().expect("pool");
                if s.len() != 4 {
                    return err(format!("pooling needs a rank-4 input, got {:?}", s));
                }
                if p.padding >= p.window {
                    return err("pool padding must be smaller than the window".into());
                }
                let dims = (
                    crate::kernels::out_dim(s[2], p.window, p.stride, p.padding),
                    crate::kernels::out_dim(s[3], p.window, p.stride, p.padding),
                );
                match dims {
                    (Ok(oh), Ok(ow)) => Ok(vec![s[0], s[1], oh, ow]),
                    (Err(e), _) | (_, Err(e)) => err(e.to_string()),
                }
            }
            Op::ResidualAdd { .. } => {
                if src(0) != src(1) {
                    return err(format!("residual operands differ in shape: {:?} vs {:?}", src(0), src(1)));
                }
                Ok(src(0).clone())
            }
            Op::Concat { inputs } => {
                if inputs.is_empty() {
                    return err("concat needs at least one input".into());
                }
                let first = src(0);
                let mut out = first.clone();
                out[1] = 0;
                for k in 0..ins.len() {
                    let s = src(k);
                    let same_rest =
                        s.len() == first.len() && s.iter().zip(first).enumerate().all(|(ax, (a, b))| ax == 1 || a == b);
                    if !same_rest {
                        return err(format!("concat operands {:?} and {:?} differ off the channel axis", first, s));
                    }
                    out[1] += s[1];
                }
                Ok(out)
            }
        }
    }

    /// Convolution hyperparameters for a conv node given its input shape.
    pub fn conv_spec(&self, node: &Node, input_shape: &[usize]) -> Option<ConvSpec> {
        match node.op {
            Op::Conv { out_channels, kernel, stride, padding, .. } => Some(ConvSpec {
                in_channels: input_shape[1],
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            }),
            _ => None,
        }
    }
}

/// Weight tensor shape of a linear layer given its input shape.
pub fn weight_shape(op: &Op, input_shape: &[usize]) -> Option<Vec<usize>> {
    match *op {
        Op::Conv { out_channels, kernel, .. } => Some(vec![out_channels, input_shape[1], kernel, kernel]),
        Op::Fc { out_features, .. } => Some(vec![out_features, input_shape[1..].iter().product()]),
        _ => None,
    }
}
