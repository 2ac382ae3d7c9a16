use super::{Analysis, Calibration, FloatModel, GraphError, Op, Result, Topology};
use crate::dyadic::{dn, DyadicScale};
use crate::kernels::{ConvSpec, PoolKind, PoolSpec};
use crate::quantizer::{per_channel_symmetric, quantize_codes, QuantParams};
use crate::tensor::{pack, BitWidth, PackedTensor};
use std::collections::BTreeMap;

/// Bit-width of the model input site.
pub const INPUT_BITS: BitWidth = BitWidth::B8;
/// Bit-width of sites with no linear consumer downstream (the model output).
pub const OUTPUT_BITS: BitWidth = BitWidth::B8;

/// A conv or fc layer with everything bound for integer execution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLinear {
    pub bits: BitWidth,
    /// Weight codes `[O, ...]`.
    pub weight: PackedTensor,
    /// Per-output-channel symmetric weight parameters.
    pub weight_params: QuantParams,
    pub conv: Option<ConvSpec>,
    /// INT32 bias codes at scale `S_h · S_w[o]`.
    pub bias: Vec<i32>,
    /// `S_h · S_w[o]`, the scale of each bias code.
    pub bias_scales: Vec<f64>,
    /// Bias minus the input zero-point correction `Z_h · Σ_k q_w[o, k]`.
    pub acc_offset: Vec<i32>,
    /// `DN(S_h · S_w[o] / S_a)` per output channel.
    pub rescale: Vec<DyadicScale>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum QuantOp {
    Input,
    Linear(QuantLinear),
    /// `max(q, Z)` on the producer's codes; shares the producer's parameters.
    Relu,
    /// Pooling on centred codes then `DN(S_in / S_out)` (avg: `DN(S_in / (area · S_out))`).
    Pool {
        spec: PoolSpec,
        rescale: DyadicScale,
    },
    /// `DN(S_m / S_a)` and `DN(S_r / S_a)`, each rounded before the sum.
    ResidualAdd {
        main: DyadicScale,
        skip: DyadicScale,
    },
    /// `DN(S_i / S_a)` per branch.
    Concat {
        rescales: Vec<DyadicScale>,
    },
}

impl QuantOp {
    /// Number of dyadic rescale edges bound to this node.
    pub fn dyadic_edges(&self) -> usize {
        match self {
            QuantOp::Input | QuantOp::Relu => 0,
            QuantOp::Linear(_) | QuantOp::Pool { .. } => 1,
            QuantOp::ResidualAdd { .. } => 2,
            QuantOp::Concat { rescales } => rescales.len(),
        }
    }
}

/// One node of a quantized graph and the parameters of its output site.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantNode {
    pub name: String,
    pub act: QuantParams,
    /// Lower clamp at `Z`, from a fused ReLU consumer.
    pub relu: bool,
    pub op: QuantOp,
}

/// Topology plus statically bound integer parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGraph {
    pub topology: Topology,
    pub nodes: Vec<QuantNode>,
    /// Weight bit-width per linear layer.
    pub bits: BTreeMap<String, u32>,
    analysis: Analysis,
}

impl QuantGraph {
    /// Assembles a graph from prebuilt nodes, checking they line up with the topology.
    pub fn from_parts(topology: Topology, nodes: Vec<QuantNode>, bits: BTreeMap<String, u32>) -> Result<Self> {
        let analysis = topology.analyze()?;
        if nodes.len() != topology.nodes.len() {
            return Err(GraphError::Topology(format!(
                "{} quantized nodes for {} layers",
                nodes.len(),
                topology.nodes.len()
            )));
        }
        for (i, (q, n)) in nodes.iter().zip(&topology.nodes).enumerate() {
            let bad = |m: &str| Err(GraphError::Params { layer: n.name.clone(), msg: m.into() });
            if q.name != n.name {
                return bad("quantized node name does not match the topology");
            }
            if q.act.scales.len() != 1 {
                return bad("activation parameters must be per-tensor");
            }
            let ok = match (&q.op, &n.op) {
                (QuantOp::Input, Op::Input { .. }) | (QuantOp::Relu, Op::Relu { .. }) => true,
                (QuantOp::Linear(l), Op::Conv { .. } | Op::Fc { .. }) => {
                    let in_shape = &analysis.shapes[analysis.inputs[i][0]];
                    let ws = super::weight_shape(&n.op, in_shape).expect("linear");
                    let o = ws[0];
                    l.weight.dims() == ws.as_slice()
                        && l.weight_params.scales.len() == o
                        && [l.bias.len(), l.bias_scales.len(), l.acc_offset.len(), l.rescale.len()]
                            .iter()
                            .all(|&x| x == o)
                        && l.conv.is_some() == matches!(n.op, Op::Conv { .. })
                }
                (QuantOp::Pool { spec, .. }, Op::MaxPool { .. } | Op::AvgPool { .. }) => {
                    Some(*spec) == n.op.pool_spec()
                }
                (QuantOp::ResidualAdd { .. }, Op::ResidualAdd { .. }) => true,
                (QuantOp::Concat { rescales }, Op::Concat { inputs }) => rescales.len() == inputs.len(),
                _ => false,
            };
            if !ok {
                return bad("quantized node does not match its topology layer");
            }
        }
        Ok(QuantGraph { topology, nodes, bits, analysis })
    }

    pub fn analysis(&self) -> &Analysis {
        &self.analysis
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.analysis.shapes[self.analysis.input]
    }

    pub fn output_params(&self) -> &QuantParams {
        &self.nodes[self.analysis.output].act
    }

    /// Total number of dyadic rescale edges.
    pub fn dyadic_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.op.dyadic_edges()).sum()
    }
}

/// Assigns `bits` to every conv / fc layer, optionally keeping the first and
/// last linear layers at 8 bits.
pub fn uniform_bits(topology: &Topology, bits: u32, pin_first_last: bool) -> BTreeMap<String, u32> {
    let linear = topology.linear_layers();
    linear
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let pinned = pin_first_last && (k == 0 || k + 1 == linear.len());
            (topology.nodes[i].name.clone(), if pinned { 8 } else { bits })
        })
        .collect()
}

/// Bit-width of every node's output site.
///
/// A site carries the widest precision any consumer asks for: a linear layer
/// asks for its own bit-width, while ReLU, pooling, residual-add and concat
/// pass their own site's requirement upstream. A ReLU always matches its
/// producer. The input site is fixed at 8 bits.
pub fn site_bits(topology: &Topology, bits: &BTreeMap<String, u32>) -> Result<Vec<BitWidth>> {
    let a = topology.analyze()?;
    let width = |name: &str| -> Result<BitWidth> {
        let b = *bits.get(name).ok_or_else(|| GraphError::MissingBits(name.into()))?;
        BitWidth::from_bits(b)
            .filter(|&w| w != BitWidth::B32)
            .ok_or_else(|| GraphError::Params { layer: name.into(), msg: format!("unsupported bit-width {b}") })
    };
    for &i in &topology.linear_layers() {
        width(&topology.nodes[i].name)?;
    }
    let n = topology.nodes.len();
    let mut out: Vec<Option<BitWidth>> = vec![None; n];
    for i in (0..n).rev() {
        let mut need: Option<BitWidth> = None;
        for &c in &a.consumers[i] {
            let req = if topology.nodes[c].op.is_linear() {
                width(&topology.nodes[c].name)?
            } else {
                out[c].expect("reverse order")
            };
            need = Some(need.map_or(req, |b: BitWidth| b.max(req)));
        }
        out[i] = Some(need.unwrap_or(OUTPUT_BITS));
    }
    let mut out: Vec<BitWidth> = out.into_iter().map(Option::unwrap).collect();
    out[a.input] = INPUT_BITS;
    for i in 0..n {
        if let Op::Relu { .. } = topology.nodes[i].op {
            out[i] = out[a.inputs[i][0]];
        }
    }
    Ok(out)
}

fn dn_at(site: &str, ratio: f64) -> Result<DyadicScale> {
    dn(ratio).map_err(|source| GraphError::Dyadic { site: site.into(), source })
}

/// Quantizes a BN-folded float model with static calibration ranges.
///
/// Weights are per-channel symmetric at each layer's bit-width, activations
/// per-tensor asymmetric at their site's bit-width, the input 8-bit symmetric.
/// A conv / fc or residual-add whose only consumer is a ReLU takes the ReLU's
/// range and clamps at its zero point, so the ReLU itself is a no-op.
pub fn build_quant_graph(model: &FloatModel, calib: &Calibration, bits: &BTreeMap<String, u32>) -> Result<QuantGraph> {
    let topo = &model.topology;
    if let Some(n) = topo.nodes.iter().find(|n| matches!(n.op, Op::Conv { batch_norm: true, .. })) {
        return Err(GraphError::NotFolded(n.name.clone()));
    }
    let a = model.analysis();
    let widths = site_bits(topo, bits)?;
    let n = topo.nodes.len();

    let fused: Vec<bool> = (0..n)
        .map(|i| {
            matches!(topo.nodes[i].op, Op::Conv { .. } | Op::Fc { .. } | Op::ResidualAdd { .. })
                && a.consumers[i].len() == 1
                && matches!(topo.nodes[a.consumers[i][0]].op, Op::Relu { .. })
        })
        .collect();

    let mut acts: Vec<QuantParams> = Vec::with_capacity(n);
    for i in 0..n {
        let name = &topo.nodes[i].name;
        let params = match topo.nodes[i].op {
            Op::Relu { .. } => acts[a.inputs[i][0]].clone(),
            _ => {
                let site = if fused[i] { &topo.nodes[a.consumers[i][0]].name } else { name };
                let r = calib.get(site).ok_or_else(|| GraphError::MissingCalibration(site.clone()))?;
                let q = if i == a.input {
                    QuantParams::symmetric(r.r_min, r.r_max, widths[i])
                } else {
                    QuantParams::asymmetric(r.r_min, r.r_max, widths[i])
                };
                q.map_err(|source| GraphError::Quant { site: site.clone(), source })?
            }
        };
        acts.push(params);
    }

    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let node = &topo.nodes[i];
        let name = node.name.as_str();
        let s_a = acts[i].scale();
        let src_scale = |k: usize| acts[a.inputs[i][k]].scale();
        let op = match &node.op {
            Op::Input { .. } => QuantOp::Input,
            Op::Relu { .. } => QuantOp::Relu,
            Op::Conv { .. } | Op::Fc { .. } => QuantOp::Linear(quantize_linear(model, i, &acts, bits)?),
            Op::MaxPool { .. } | Op::AvgPool { .. } => {
                let spec = node.op.pool_spec().expect("pool");
                let area = if spec.kind == PoolKind::Avg { spec.area() as f64 } else { 1.0 };
                QuantOp::Pool { spec, rescale: dn_at(name, src_scale(0) / (area * s_a))? }
            }
            Op::ResidualAdd { .. } => {
                QuantOp::ResidualAdd { main: dn_at(name, src_scale(0) / s_a)?, skip: dn_at(name, src_scale(1) / s_a)? }
            }
            Op::Concat { .. } => QuantOp::Concat {
                rescales: (0..a.inputs[i].len()).map(|k| dn_at(name, src_scale(k) / s_a)).collect::<Result<_>>()?,
            },
        };
        nodes.push(QuantNode { name: name.to_string(), act: acts[i].clone(), relu: fused[i], op });
    }
    let bits = topo.linear_layers().iter().map(|&i| (topo.nodes[i].name.clone(), bits[&topo.nodes[i].name])).collect();
    QuantGraph::from_parts(topo.clone(), nodes, bits)
}

fn quantize_linear(
    model: &FloatModel,
    i: usize,
    acts: &[QuantParams],
    bits: &BTreeMap<String, u32>,
) -> Result<QuantLinear> {
    let node = &model.topology.nodes[i];
    let a = model.analysis();
    let name = node.name.as_str();
    let p = &model.params[name];
    let width = BitWidth::from_bits(bits[name]).expect("checked by site_bits");
    let quant_err = |source| GraphError::Quant { site: name.into(), source };

    let weight_params = per_channel_symmetric(&p.weight, width).map_err(quant_err)?;
    let codes = quantize_codes(&p.weight, &weight_params).map_err(quant_err)?;
    let weight = pack(&codes, width, p.weight.shape().clone())?;

    let h = &acts[a.inputs[i][0]];
    let (s_h, z_h) = (h.scale(), h.zero_point as i64);
    let s_a = acts[i].scale();
    let out = weight_params.scales.len();
    let per = codes.len() / out;
    let mut bias = Vec::with_capacity(out);
    let mut bias_scales = Vec::with_capacity(out);
    let mut acc_offset = Vec::with_capacity(out);
    let mut rescale = Vec::with_capacity(out);
    for o in 0..out {
        let sb = s_h * weight_params.scales[o];
        let overflow = || GraphError::BiasOverflow { layer: name.into(), channel: o };
        let real = p.bias.as_ref().map_or(0.0, |b| b[o] as f64);
        let qb = (real / sb).round();
        if !(qb >= i32::MIN as f64 && qb <= i32::MAX as f64) {
            return Err(overflow());
        }
        let wsum: i64 = codes[o * per..(o + 1) * per].iter().map(|&c| c as i64).sum();
        let off = i32::try_from(qb as i64 - z_h * wsum).map_err(|_| overflow())?;
        bias.push(qb as i32);
        bias_scales.push(sb);
        acc_offset.push(off);
        rescale.push(dn_at(name, sb / s_a)?);
    }
    let conv = model.topology.conv_spec(node, &a.shapes[a.inputs[i][0]]);
    Ok(QuantLinear { bits: width, weight, weight_params, conv, bias, bias_scales, acc_offset, rescale })
}
