use super::{LayerCosts, MpqError, Result};
use crate::graph::{forward_float, FloatModel, Op};
use crate::quantizer::{dequantize_codes, per_channel_symmetric, quantize_codes};
use crate::tensor::{BitWidth, FloatTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// How a layer's Hessian trace enters Ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceNormalization {
    /// `Tr(H)` as given.
    #[default]
    Raw,
    /// `Tr(H) / n` with `n` the layer's weight count.
    PerParameter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub layer: String,
    pub trace: f64,
    /// `‖Q_b(W) − W‖₂²` per bit option.
    pub perturbation: BTreeMap<u32, f64>,
    /// `trace · perturbation` per bit option.
    pub omega: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityTable {
    /// Ω per layer and bit option.
    pub fn omegas(&self) -> BTreeMap<String, BTreeMap<u32, f64>> {
        self.rows.iter().map(|r| (r.layer.clone(), r.omega.clone())).collect()
    }
}

impl LayerCosts {
    /// Copies Ω values into the cost table; every layer and option must be covered.
    pub fn apply_sensitivity(&mut self, omegas: &BTreeMap<String, BTreeMap<u32, f64>>) -> Result<()> {
        for l in &mut self.layers {
            for o in &mut l.options {
                o.omega = *omegas
                    .get(&l.name)
                    .and_then(|m| m.get(&o.bits))
                    .ok_or_else(|| MpqError::MissingSensitivity { layer: l.name.clone(), bits: o.bits })?;
            }
        }
        Ok(())
    }
}

/// `‖Q_b(W) − W‖₂²` under the per-channel symmetric weight quantizer.
pub fn perturbation(w: &FloatTensor, bits: u32) -> Result<f64> {
    let width = BitWidth::from_bits(bits).ok_or(crate::quantizer::QuantError::UnsupportedBits(bits))?;
    let p = per_channel_symmetric(w, width)?;
    let q = dequantize_codes(&quantize_codes(w, &p)?, w.dims(), &p)?;
    Ok(w.data().iter().zip(q.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

/// `Ω_i^(b) = Tr(H_i) · ‖Q_b(W_i) − W_i‖₂²` for every conv / fc layer.
pub fn sensitivity(
    model: &FloatModel,
    traces: &BTreeMap<String, f64>,
    bit_options: &[u32],
    norm: TraceNormalization,
) -> Result<SensitivityTable> {
    let mut rows = Vec::new();
    for i in model.topology.linear_layers() {
        let name = &model.topology.nodes[i].name;
        let w = &model.params[name].weight;
        let raw = *traces.get(name).ok_or_else(|| MpqError::UnknownLayer(name.clone()))?;
        if !(raw.is_finite() && raw >= 0.0) {
            return Err(MpqError::InvalidTrace { layer: name.clone(), value: raw });
        }
        let trace = match norm {
            TraceNormalization::Raw => raw,
            TraceNormalization::PerParameter => raw / w.len() as f64,
        };
        let mut perturbation_by_bits = BTreeMap::new();
        let mut omega = BTreeMap::new();
        for &b in bit_options {
            let d = perturbation(w, b)?;
            perturbation_by_bits.insert(b, d);
            omega.insert(b, trace * d);
        }
        rows.push(SensitivityRow { layer: name.clone(), trace, perturbation: perturbation_by_bits, omega });
    }
    Ok(SensitivityTable { rows })
}

/// Per-sample Hutchinson estimates `vᵀ H v` with Rademacher `v`, where `H v`
/// is a central finite difference of the gradient with step
/// `ε = 1e-3 · (1 + ‖w‖∞)`.
pub fn hutchinson_samples<F>(mut grad: F, w: &[f64], samples: usize, seed: u64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-3 * (1.0 + w.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut plus = vec![0.0; w.len()];
    let mut minus = vec![0.0; w.len()];
    (0..samples)
        .map(|_| {
            let v: Vec<f64> = (0..w.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            for j in 0..w.len() {
                plus[j] = w[j] + eps * v[j];
                minus[j] = w[j] - eps * v[j];
            }
            let (gp, gm) = (grad(&plus), grad(&minus));
            v.iter().zip(gp.iter().zip(&gm)).map(|(vi, (a, b))| vi * (a - b) / (2.0 * eps)).sum()
        })
        .collect()
}

/// Mean of [`hutchinson_samples`].
pub fn hutchinson_trace<F>(grad: F, w: &[f64], samples: usize, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(samples >= 1, "at least one sample");
    hutchinson_samples(grad, w, samples, seed).iter().sum::<f64>() / samples as f64
}

/// Unfolds a layer input into patch columns: `K × cols` row-major.
fn patches(op: &Op, x: &FloatTensor, spec: Option<crate::kernels::ConvSpec>) -> (usize, Vec<f64>) {
    let d = x.dims();
    match (op, spec) {
        (Op::Conv { .. }, Some(spec)) => {
            let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
            let (oh, ow) = spec.output_hw(h, w).expect("validated geometry");
            let k = spec.patch_len();
            let cols = n * oh * ow;
            let mut out = vec![0.0; k * cols];
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let col = (b * oh + oy) * ow + ox;
                        for ci in 0..c {
                            for ky in 0..spec.kernel_h {
                                for kx in 0..spec.kernel_w {
                                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let row = (ci * spec.kernel_h + ky) * spec.kernel_w + kx;
                                        out[row * cols + col] =
                                            x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (cols, out)
        }
        _ => {
            let n = d[0];
            let k = x.len() / n;
            let mut out = vec![0.0; k * n];
            for b in 0..n {
                for j in 0..k {
                    out[j * n + b] = x.data()[b * k + j] as f64;
                }
            }
            (n, out)
        }
    }
}

/// Hutchinson traces of a layer-local reconstruction loss
/// `L(W) = ‖(W − W₀) P‖² / (2·cols)` where `P` holds the layer's input
/// patches over `batches`. Its gradient is `(W − W₀) P Pᵀ / cols`.
pub fn estimate_traces(
    model: &FloatModel,
    batches: &[FloatTensor],
    samples: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let topo = &model.topology;
    let a = model.analysis();
    let outputs: Vec<Vec<FloatTensor>> =
        batches.iter().map(|b| forward_float(model, b)).collect::<std::result::Result<_, _>>()?;
    let mut traces = BTreeMap::new();
    for (layer_idx, i) in topo.linear_layers().into_iter().enumerate() {
        let node = &topo.nodes[i];
        let src = a.inputs[i][0];
        let spec = topo.conv_spec(node, &a.shapes[src]);
        let w0: Vec<f64> = model.params[&node.name].weight.data().iter().map(|&v| v as f64).collect();
        let out = model.params[&node.name].weight.dims()[0];
        let k = w0.len() / out;
        // Gram matrix P Pᵀ / cols accumulated over batches
        let mut gram = vec![0.0; k * k];
        let mut total_cols = 0usize;
        for outs in &outputs {
            let (cols, p) = patches(&node.op, &outs[src], spec);
            for r in 0..k {
                for s in r..k {
                    let dot: f64 =
                        p[r * cols..(r + 1) * cols].iter().zip(&p[s * cols..(s + 1) * cols]).map(|(x, y)| x * y).sum();
                    gram[r * k + s] += dot;
                    if s != r {
                        gram[s * k + r] += dot;
                    }
                }
            }
            total_cols += cols;
        }
        gram.iter_mut().for_each(|g| *g /= total_cols as f64);
        let grad = |w: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; w.len()];
            for o in 0..out {
                for s in 0..k {
                    g[o * k + s] = (0..k).map(|r| (w[o * k + r] - w0[o * k + r]) * gram[r * k + s]).sum();
                }
            }
            g
        };
        let t = hutchinson_trace(grad, &w0, samples, seed.wrapping_add(layer_idx as u64));
        traces.insert(node.name.clone(), t.max(0.0));
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{random_input, random_model, toy_cnn};

    #[test]
    fn zero_weights_have_zero_perturbation() {
        let zero = FloatTensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(perturbation(&zero, 4).unwrap(), 0.0);
        assert_eq!(perturbation(&zero, 8).unwrap(), 0.0);
    }

    #[test]
    fn channel_maximum_sits_half_a_step_off_the_grid() {
        // S = 2·3/15 puts 3 at 7.5 steps; it rounds to 8 and clamps to 7
        let w = FloatTensor::from_vec(vec![1, 1], vec![3.0]).unwrap();
        assert!((perturbation(&w, 4).unwrap() - 0.04).abs() < 1e-6);
        assert!((perturbation(&w, 8).unwrap() - (3.0f64 / 255.0).powi(2)).abs() < 1e-8);
    }

    #[test]
    fn zero_trace_gives_zero_omega() {
        let m = random_model(toy_cnn(), 1);
        let traces: BTreeMap<String, f64> = m.params.keys().map(|k| (k.clone(), 0.0)).collect();
        let t = sensitivity(&m, &traces, &[4, 8], TraceNormalization::Raw).unwrap();
        assert!(t.rows.iter().all(|r| r.omega.values().all(|&o| o == 0.0)));
        assert!(t.rows.iter().all(|r| r.perturbation[&4] > 0.0));
    }

    #[test]
    fn narrower_bits_are_never_less_sensitive() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let o = rng.gen_range(1..6);
            let k = rng.gen_range(1..20);
            let scale = rng.gen_range(0.01f32..10.0);
            let w =
                FloatTensor::from_vec(vec![o, k], (0..o * k).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
            assert!(perturbation(&w, 8).unwrap() <= perturbation(&w, 4).unwrap());
        }
    }

    #[test]
    fn per_parameter_normalization_divides_by_count() {
        let m = random_model(toy_cnn(), 2);
        let traces: BTreeMap<String, f64> = m.params.keys().map(|k| (k.clone(), 12.0)).collect();
        let raw = sensitivity(&m, &traces, &[4], TraceNormalization::Raw).unwrap();
        let per = sensitivity(&m, &traces, &[4], TraceNormalization::PerParameter).unwrap();
        for (r, p) in raw.rows.iter().zip(&per.rows) {
            let n = m.params[&r.layer].weight.len() as f64;
            assert!((r.omega[&4] / n - p.omega[&4]).abs() <= 1e-12 * r.omega[&4]);
        }
        let mut bad = traces.clone();
        bad.insert("fc".into(), -1.0);
        assert!(matches!(sensitivity(&m, &bad, &[4], TraceNormalization::Raw), Err(MpqError::InvalidTrace { .. })));
    }

    #[test]
    fn hutchinson_quadratics() {
        let zero = vec![0.0; 3];
        let diag = |w: &[f64]| vec![w[0], 2.0 * w[1], 3.0 * w[2]];
        assert!((hutchinson_trace(diag, &zero, 1000, 0) - 6.0).abs() < 0.3);
        assert_eq!(hutchinson_trace(|w: &[f64]| vec![0.0; w.len()], &zero, 10, 0), 0.0);
        let d = 17;
        for s in hutchinson_samples(|w: &[f64]| w.to_vec(), &vec![0.0; d], 50, 3) {
            assert_eq!(s, d as f64);
        }
    }

    #[test]
    fn hutchinson_dense_hessian_converges() {
        // H = A Aᵀ with off-diagonal terms, so single samples are noisy
        let a = [[1.0, 0.5, -0.3], [0.2, 2.0, 0.7], [-0.4, 0.1, 1.5]];
        let mut h = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] = (0..3).map(|k| a[i][k] * a[j][k]).sum();
            }
        }
        let trace: f64 = (0..3).map(|i| h[i][i]).sum();
        let grad = |w: &[f64]| (0..3).map(|i| (0..3).map(|j| h[i][j] * w[j]).sum()).collect::<Vec<f64>>();
        let est = hutchinson_trace(grad, &[0.3, -0.2, 0.5], 4000, 11);
        assert!((est - trace).abs() < 0.05 * trace, "{est} vs {trace}");
        let samples = hutchinson_samples(grad, &[0.0; 3], 20, 11);
        assert!(samples.iter().any(|&s| (s - trace).abs() > 1e-6));
    }

    #[test]
    fn estimated_traces_match_closed_form() {
        let m = random_model(toy_cnn(), 4);
        let batches = vec![random_input(&[2, 3, 8, 8], 5)];
        let est = estimate_traces(&m, &batches, 64, 1).unwrap();
        // Hessian is I_out ⊗ P Pᵀ / cols, so Tr = out · Σ‖column‖² / cols
        let outs = forward_float(&m, &batches[0]).unwrap();
        let a = m.analysis();
        for i in m.topology.linear_layers() {
            let node = &m.topology.nodes[i];
            let src = a.inputs[i][0];
            let (cols, p) = patches(&node.op, &outs[src], m.topology.conv_spec(node, &a.shapes[src]));
            let out = m.params[&node.name].weight.dims()[0] as f64;
            let exact = out * p.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let got = est[&node.name];
            assert!((got - exact).abs() < 0.25 * exact, "{}: {got} vs {exact}", node.name);
        }
    }
}
