use super::{LatencyTable, MpqError, Result};
use crate::graph::{weight_shape, Op, Topology};
use serde::Serialize;

/// Bytes per reported megabyte (2^20).
pub const MB: f64 = 1_048_576.0;
/// Bit operations per reported GBOPS unit.
pub const GBOPS: f64 = 1e9;

/// Multiply-accumulates of one sample through a conv or fc layer.
pub fn mac_count(op: &Op, input_shape: &[usize], output_shape: &[usize]) -> Option<u64> {
    match *op {
        Op::Conv { out_channels, kernel, .. } => {
            let (oh, ow) = (output_shape[2] as u64, output_shape[3] as u64);
            Some(oh * ow * out_channels as u64 * input_shape[1] as u64 * (kernel * kernel) as u64)
        }
        Op::Fc { out_features, .. } => Some(input_shape[1..].iter().product::<usize>() as u64 * out_features as u64),
        _ => None,
    }
}

/// One candidate bit-width of a layer and what it costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitOption {
    pub bits: u32,
    pub size_bytes: f64,
    pub bops: f64,
    pub latency_ms: Option<f64>,
    /// Sensitivity Ω; zero until a sensitivity table is applied.
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub weights: u64,
    /// Bias entries, stored at 32 bits whatever the weight width.
    pub biases: u64,
    pub options: Vec<BitOption>,
}

impl LayerCost {
    pub fn size_at(&self, bits: u32) -> f64 {
        (self.weights * bits as u64) as f64 / 8.0 + (self.biases * 4) as f64
    }

    pub fn bops_at(&self, bits: u32) -> f64 {
        (bits as u64 * bits as u64 * self.macs) as f64
    }

    pub fn option(&self, bits: u32) -> Option<&BitOption> {
        self.options.iter().find(|o| o.bits == bits)
    }
}

/// Cost table over every conv / fc layer, in execution order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCosts {
    pub layers: Vec<LayerCost>,
}

/// Aggregate cost of an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub size_bytes: f64,
    pub bops: f64,
    pub latency_ms: Option<f64>,
}

impl Totals {
    pub fn size_mb(&self) -> f64 {
        self.size_bytes / MB
    }

    pub fn gbops(&self) -> f64 {
        self.bops / GBOPS
    }
}

impl LayerCosts {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Totals with every layer at `bits`, whether or not it is an option (e.g. 32).
    pub fn uniform_totals(&self, bits: u32) -> Totals {
        Totals {
            size_bytes: self.layers.iter().map(|l| l.size_at(bits)).sum(),
            bops: self.layers.iter().map(|l| l.bops_at(bits)).sum(),
            latency_ms: None,
        }
    }

    /// Totals with the first and last layers at 8 bits and the rest at `bits`.
    pub fn pinned_totals(&self, bits: u32) -> Totals {
        let last = self.layers.len().saturating_sub(1);
        let b = |i: usize| if i == 0 || i == last { 8 } else { bits };
        Totals {
            size_bytes: self.layers.iter().enumerate().map(|(i, l)| l.size_at(b(i))).sum(),
            bops: self.layers.iter().enumerate().map(|(i, l)| l.bops_at(b(i))).sum(),
            latency_ms: None,
        }
    }

    /// Totals of an assignment given as one option index per layer.
    pub fn totals(&self, choice: &[usize]) -> Totals {
        let opts = || self.layers.iter().zip(choice).map(|(l, &k)| &l.options[k]);
        let latency = opts().map(|o| o.latency_ms).sum::<Option<f64>>();
        Totals {
            size_bytes: opts().map(|o| o.size_bytes).sum(),
            bops: opts().map(|o| o.bops).sum(),
            latency_ms: latency,
        }
    }

    pub fn objective(&self, choice: &[usize]) -> f64 {
        self.layers.iter().zip(choice).map(|(l, &k)| l.options[k].omega).sum()
    }
}

/// Size, BOPS and (if a table is given) latency for every conv / fc layer at
/// every bit option. Biases count at 32 bits; a conv followed by batch-norm
/// carries a bias after folding.
pub fn layer_costs(topology: &Topology, bit_options: &[u32], latency: Option<&LatencyTable>) -> Result<LayerCosts> {
    let a = topology.analyze()?;
    let mut layers = Vec::new();
    for i in topology.linear_layers() {
        let node = &topology.nodes[i];
        let in_shape = &a.shapes[a.inputs[i][0]];
        let ws = weight_shape(&node.op, in_shape).expect("linear");
        let has_bias = match node.op {
            Op::Conv { bias, batch_norm, .. } => bias || batch_norm,
            Op::Fc { bias, .. } => bias,
            _ => unreachable!(),
        };
        let mut layer = LayerCost {
            name: node.name.clone(),
            macs: mac_count(&node.op, in_shape, &a.shapes[i]).expect("linear"),
            weights: ws.iter().product::<usize>() as u64,
            biases: if has_bias { ws[0] as u64 } else { 0 },
            options: Vec::new(),
        };
        for &bits in bit_options {
            let latency_ms = match latency {
                Some(t) => Some(
                    *t.get(&(node.name.clone(), bits))
                        .ok_or_else(|| MpqError::MissingLatencyEntry { layer: node.name.clone(), bits })?,
                ),
                None => None,
            };
            layer.options.push(BitOption {
                bits,
                size_bytes: layer.size_at(bits),
                bops: layer.bops_at(bits),
                latency_ms,
                omega: 0.0,
            });
        }
        layers.push(layer);
    }
    Ok(LayerCosts { layers })
}
