use super::float_ops;
use super::model::{batch_shapes, check_input, concat_channels};
use super::{GraphError, QuantGraph, QuantLinear, QuantOp, Result};
use crate::dyadic::{clamp_code, requantize, requantize_clamped};
use crate::instrument::{OpCounter, OpCounts};
use crate::kernels::{conv2d_codes, matmul_codes, pool_values, relu_codes, KernelError};
use crate::quantizer::{dequantize_counted, quantize_counted, QuantParams};
use crate::tensor::{pack, FloatTensor, PackedTensor, Shape};

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Output codes at the output site's bit-width.
    pub codes: PackedTensor,
    /// Dequantized output.
    pub logits: FloatTensor,
    /// Codes of every node's output site, in node order.
    pub site_codes: Vec<Vec<i32>>,
    pub ops: OpCounts,
}

fn kernel_err(layer: &str) -> impl Fn(KernelError) -> GraphError + '_ {
    move |source| GraphError::Kernel { layer: layer.into(), source }
}

fn as4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Integer-only forward pass.
///
/// The input is quantized at the 8-bit input site; from there until the
/// output is dequantized every operation is an integer multiply, add, shift
/// or compare, which the returned counters record.
pub fn infer_true(g: &QuantGraph, input: &FloatTensor) -> Result<Inference> {
    let a = g.analysis();
    check_input(g.input_shape(), input.dims())?;
    let shapes = batch_shapes(a, input.dims()[0]);
    let mut counter = OpCounter::new();
    let in_node = &g.nodes[a.input];
    let q_in = quantize_counted(input, &in_node.act, &mut counter)
        .map_err(|source| GraphError::Quant { site: in_node.name.clone(), source })?;

    counter.open_window();
    let mut outs: Vec<Vec<i32>> = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let srcs = &a.inputs[i];
        let act = &node.act;
        let (bits, z) = (act.bits, act.zero_point);
        let v = match &node.op {
            QuantOp::Input => q_in.to_vec(),
            QuantOp::Relu => {
                counter.compare(outs[srcs[0]].len() as u64);
                relu_codes(&outs[srcs[0]], z)
            }
            QuantOp::Linear(l) => {
                let h = &g.nodes[srcs[0]].act;
                let acc = linear_acc(l, &outs[srcs[0]], &shapes[srcs[0]], h.zero_point, &mut counter)
                    .map_err(kernel_err(&node.name))?;
                let per = acc.len() / (shapes[i][0] * l.rescale.len());
                let o_count = l.rescale.len();
                counter.int_add(2 * acc.len() as u64);
                counter.int_mul(acc.len() as u64);
                counter.shift(acc.len() as u64);
                counter.compare(2 * acc.len() as u64);
                acc.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let o = (j / per) % o_count;
                        let v = v.checked_add(l.acc_offset[o]).ok_or(KernelError::AccumulatorOverflow)?;
                        Ok(requantize_clamped(v, l.rescale[o], bits, z, node.relu))
                    })
                    .collect::<std::result::Result<_, KernelError>>()
                    .map_err(kernel_err(&node.name))?
            }
            QuantOp::Pool { spec, rescale } => {
                let zi = g.nodes[srcs[0]].act.zero_point;
                let centred: Vec<i32> = outs[srcs[0]].iter().map(|&q| q - zi).collect();
                counter.int_add(centred.len() as u64);
                let (sums, _) =
                    pool_values(&centred, as4(&shapes[srcs[0]]), spec, &mut counter).map_err(kernel_err(&node.name))?;
                counter.int_mul(sums.len() as u64);
                counter.shift(sums.len() as u64);
                counter.int_add(sums.len() as u64);
                counter.compare(2 * sums.len() as u64);
                sums.iter().map(|&v| requantize_clamped(v, *rescale, bits, z, node.relu)).collect()
            }
            QuantOp::ResidualAdd { main, skip } => {
                let (zm, zr) = (g.nodes[srcs[0]].act.zero_point, g.nodes[srcs[1]].act.zero_point);
                let (m, r) = (&outs[srcs[0]], &outs[srcs[1]]);
                counter.int_add(5 * m.len() as u64);
                counter.int_mul(2 * m.len() as u64);
                counter.shift(2 * m.len() as u64);
                counter.compare(2 * m.len() as u64);
                m.iter()
                    .zip(r)
                    .map(|(&qm, &qr)| {
                        let sum = requantize(qm - zm, *main) as i64 + requantize(qr - zr, *skip) as i64;
                        clamp_code(sum + z as i64, bits, z, node.relu)
                    })
                    .collect()
            }
            QuantOp::Concat { rescales } => {
                let parts: Vec<Vec<i32>> = srcs
                    .iter()
                    .zip(rescales)
                    .map(|(&j, &s)| {
                        let zj = g.nodes[j].act.zero_point;
                        counter.int_add(2 * outs[j].len() as u64);
                        counter.int_mul(outs[j].len() as u64);
                        counter.shift(outs[j].len() as u64);
                        counter.compare(2 * outs[j].len() as u64);
                        outs[j].iter().map(|&q| requantize_clamped(q - zj, s, bits, z, node.relu)).collect()
                    })
                    .collect();
                concat_parts(&parts, &shapes, srcs)
            }
        };
        outs.push(v);
    }
    counter.close_window();
    finish(g, outs, &shapes, counter)
}

/// `Σ q_w · q_h` per output, with padded conv inputs reading the input zero point.
fn linear_acc(
    l: &QuantLinear,
    x: &[i32],
    in_shape: &[usize],
    z_h: i32,
    counter: &mut OpCounter,
) -> std::result::Result<Vec<i32>, KernelError> {
    let w = l.weight.to_vec();
    match &l.conv {
        Some(spec) => Ok(conv2d_codes(&w, x, as4(in_shape), spec, 0, z_h, counter)?.0),
        None => {
            let (n, o) = (in_shape[0], l.rescale.len());
            let k = x.len() / n;
            let xt: Vec<i32> = (0..k * n).map(|idx| x[(idx % n) * k + idx / n]).collect();
            let on = matmul_codes(&w, &xt, o, k, n, 0, counter)?;
            Ok((0..n * o).map(|idx| on[(idx % o) * n + idx / o]).collect())
        }
    }
}

fn concat_parts(parts: &[Vec<i32>], shapes: &[Vec<usize>], srcs: &[usize]) -> Vec<i32> {
    let part_shapes: Vec<Vec<usize>> = srcs.iter().map(|&j| shapes[j].clone()).collect();
    concat_channels(&(0..parts.len()).collect::<Vec<_>>(), parts, &part_shapes)
}

fn finish(g: &QuantGraph, outs: Vec<Vec<i32>>, shapes: &[Vec<usize>], mut counter: OpCounter) -> Result<Inference> {
    let a = g.analysis();
    let out = &g.nodes[a.output];
    let codes = pack(&outs[a.output], out.act.bits, Shape::new(shapes[a.output].clone())?)?;
    let logits = dequantize_counted(&codes, &out.act, &mut counter)
        .map_err(|source| GraphError::Quant { site: out.name.clone(), source })?;
    Ok(Inference { codes, logits, site_codes: outs, ops: counter.counts() })
}

#[inline]
fn fake_code(v: f32, act: &QuantParams, relu: bool) -> i32 {
    let q = (v / act.scale() as f32).round() as i64 + act.zero_point as i64;
    clamp_code(q, act.bits, act.zero_point, relu)
}

fn dequant(codes: &[i32], act: &QuantParams) -> Vec<f32> {
    codes.iter().map(|&q| act.real(q, 0) as f32).collect()
}

/// Simulated quantization in FP32.
///
/// Weights, biases and activations are dequantized, every layer computes in
/// FP32, and each site requantizes by dividing by its scale with the same
/// rounding rule as the integer path. Residual operands are summed in FP32
/// before that single requantization.
pub fn infer_fake(g: &QuantGraph, input: &FloatTensor) -> Result<Inference> {
    let a = g.analysis();
    check_input(g.input_shape(), input.dims())?;
    let shapes = batch_shapes(a, input.dims()[0]);
    let mut counter = OpCounter::new();
    let in_node = &g.nodes[a.input];
    let q_in = quantize_counted(input, &in_node.act, &mut counter)
        .map_err(|source| GraphError::Quant { site: in_node.name.clone(), source })?;

    let mut outs: Vec<Vec<i32>> = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let srcs = &a.inputs[i];
        let act = &node.act;
        let real = |j: usize| dequant(&outs[j], &g.nodes[j].act);
        let requant = |vals: Vec<f32>, counter: &mut OpCounter| -> Vec<i32> {
            counter.float(3 * vals.len() as u64);
            vals.into_iter().map(|v| fake_code(v, act, node.relu)).collect()
        };
        let v = match &node.op {
            QuantOp::Input => q_in.to_vec(),
            QuantOp::Relu => relu_codes(&outs[srcs[0]], act.zero_point),
            QuantOp::Linear(l) => {
                let x = real(srcs[0]);
                let o = l.rescale.len();
                let wc = l.weight.to_vec();
                let per = wc.len() / o;
                let w: Vec<f32> =
                    wc.iter().enumerate().map(|(j, &q)| l.weight_params.real(q, j / per) as f32).collect();
                let b: Vec<f32> = l.bias.iter().zip(&l.bias_scales).map(|(&q, &s)| (q as f64 * s) as f32).collect();
                let s = &shapes[srcs[0]];
                let y = match &l.conv {
                    Some(spec) => float_ops::conv2d(&w, Some(&b), &x, as4(s), spec).0,
                    None => float_ops::fc(&w, Some(&b), &x, s[0], x.len() / s[0], o),
                };
                counter.float(2 * (y.len() * per) as u64);
                requant(y, &mut counter)
            }
            QuantOp::Pool { spec, .. } => {
                let x = real(srcs[0]);
                let (y, _) = float_ops::pool(&x, as4(&shapes[srcs[0]]), spec);
                counter.float((y.len() * spec.area()) as u64);
                requant(y, &mut counter)
            }
            QuantOp::ResidualAdd { .. } => {
                let y: Vec<f32> = real(srcs[0]).iter().zip(real(srcs[1])).map(|(m, r)| m + r).collect();
                counter.float(y.len() as u64);
                requant(y, &mut counter)
            }
            QuantOp::Concat { .. } => {
                let parts: Vec<Vec<i32>> = srcs.iter().map(|&j| requant(real(j), &mut counter)).collect();
                concat_parts(&parts, &shapes, srcs)
            }
        };
        outs.push(v);
    }
    finish(g, outs, &shapes, counter)
}
