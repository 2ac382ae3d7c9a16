//! Acceptance suite: one PASS/FAIL line per criterion.

use dyq::dyadic::{dn, requantize};
use dyq::graph::{
    build_quant_graph, calibrate, fold_bn, forward_float, infer_true, load_topology, measure_divergence, uniform_bits,
    FloatModel, LayerParams, Node, Op, QuantGraph, Topology,
};
use dyq::instrument::OpCounter;
use dyq::kernels::{conv2d_codes, int_matmul, matmul_codes, ConvSpec};
use dyq::mpq::{
    brute_force, hutchinson_samples, hutchinson_trace, layer_costs, solve_ilp, BitOption, Constraints, LayerCost,
    LayerCosts, MpqError,
};
use dyq::tensor::{decode_container, encode_container, pack, unpack, BitWidth, FloatTensor, Shape, Tensor};
use dyq::zoo;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic;
use std::path::Path;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn residual_rounding() -> Outcome {
    let start = Instant::now();
    let (g, x) = zoo::residual_rounding_witness();
    let fake = dyq::graph::infer_fake(&g, &x).map_err(|e| e.to_string())?.codes.to_vec();
    let real = infer_true(&g, &x).map_err(|e| e.to_string())?.codes.to_vec();
    let t = start.elapsed();
    check(fake == [7] && real == [6] && t < Duration::from_secs(1), format!("fake {fake:?}, true {real:?}, {t:?}"))
}

fn calibrated_graph(topology: Topology, seed: u64, bits: u32) -> (QuantGraph, FloatTensor) {
    let model = fold_bn(&zoo::random_model(topology, seed)).unwrap();
    let mut shape = model.input_shape().to_vec();
    shape[0] = 4;
    let batches: Vec<FloatTensor> = (0..4).map(|i| zoo::random_input(&shape, 100 + i)).collect();
    let calib = calibrate(&model, &batches, 0.9).unwrap();
    let g = build_quant_graph(&model, &calib, &uniform_bits(&model.topology, bits, false)).unwrap();
    (g, zoo::random_input(&shape, 999))
}

fn divergence_trend() -> Outcome {
    let start = Instant::now();
    let (g, x) = calibrated_graph(zoo::residual_network(7, 8, 8), 7, 4);
    let report = measure_divergence(&g, &x).map_err(|e| e.to_string())?;
    let (first, last) = (report.first().unwrap(), report.last().unwrap());
    let t = start.elapsed();
    check(
        last > first && last > 0.01 && t < Duration::from_secs(30),
        format!("first {first:.4}, last {last:.4} over {} sites, {t:?}", report.sites.len()),
    )
}

fn resnet18_costs() -> Outcome {
    let start = Instant::now();
    let topology =
        load_topology(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/resnet18.json")).map_err(|e| e.to_string())?;
    let costs = layer_costs(&topology, &[4, 8], None).map_err(|e| e.to_string())?;
    let fp = costs.uniform_totals(32);
    let w8 = costs.uniform_totals(8);
    let w4 = costs.pinned_totals(4);
    let in_band = |v: f64, lo: f64, hi: f64, tol: f64| v >= lo * (1.0 - tol) && v <= hi * (1.0 + tol);
    let t = start.elapsed();
    let ok = within(fp.size_mb(), 44.6, 0.02)
        && within(fp.gbops(), 1858.0, 0.02)
        && in_band(w8.size_mb(), 11.1, 11.2, 0.05)
        && in_band(w8.gbops(), 114.0, 116.0, 0.05)
        && within(w4.size_mb(), 5.8, 0.05)
        && within(w4.gbops(), 34.0, 0.05)
        && t < Duration::from_secs(5);
    check(
        ok,
        format!(
            "fp32 {:.2} MB / {:.1} G, w8 {:.2} MB / {:.1} G, w4 {:.2} MB / {:.1} G",
            fp.size_mb(),
            fp.gbops(),
            w8.size_mb(),
            w8.gbops(),
            w4.size_mb(),
            w4.gbops()
        ),
    )
}

fn random_instance(rng: &mut ChaCha8Rng, layers: usize, bits: &[u32]) -> LayerCosts {
    let layers = (0..layers)
        .map(|i| {
            let options = bits
                .iter()
                .map(|&b| BitOption {
                    bits: b,
                    size_bytes: rng.gen_range(1.0..100.0f64).round(),
                    bops: rng.gen_range(1.0..1000.0),
                    latency_ms: Some(rng.gen_range(0.1..5.0)),
                    omega: rng.gen_range(0.0..10.0),
                })
                .collect();
            LayerCost { name: format!("l{i}"), macs: 0, weights: 0, biases: 0, options }
        })
        .collect();
    LayerCosts { layers }
}

fn random_constraints(rng: &mut ChaCha8Rng, costs: &LayerCosts) -> Constraints {
    let span = |f: &dyn Fn(&BitOption) -> f64| {
        let lo: f64 = costs.layers.iter().map(|l| l.options.iter().map(f).fold(f64::INFINITY, f64::min)).sum();
        let hi: f64 = costs.layers.iter().map(|l| l.options.iter().map(f).fold(0.0, f64::max)).sum();
        (lo, hi)
    };
    let mut c = Constraints::default();
    let pick = |rng: &mut ChaCha8Rng, f: &dyn Fn(&BitOption) -> f64| {
        let (lo, hi) = span(f);
        rng.gen_bool(0.5).then(|| lo + rng.gen_range(-0.05..1.05) * (hi - lo))
    };
    c.size_bytes = pick(rng, &|o| o.size_bytes);
    c.bops = pick(rng, &|o| o.bops);
    c.latency_ms = pick(rng, &|o| o.latency_ms.unwrap());
    c
}

fn ilp_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut slowest = Duration::ZERO;
    let (mut agree, mut total, mut infeasible) = (0, 0, 0);
    for (count, max_layers, bits) in [(200, 12, &[4u32, 8][..]), (50, 8, &[2, 4, 8][..])] {
        for _ in 0..count {
            let layers = rng.gen_range(1..=max_layers);
            let costs = random_instance(&mut rng, layers, bits);
            let constraints = random_constraints(&mut rng, &costs);
            let start = Instant::now();
            let solved = solve_ilp(&costs, &constraints, &BTreeMap::new());
            slowest = slowest.max(start.elapsed());
            let oracle = brute_force(&costs, &constraints, &BTreeMap::new());
            total += 1;
            match (solved, oracle) {
                (Ok(a), Ok(b)) if a.objective == b.objective => agree += 1,
                (Err(MpqError::Infeasible(_)), Err(MpqError::Infeasible(_))) => {
                    agree += 1;
                    infeasible += 1;
                }
                _ => {}
            }
        }
    }
    check(
        agree == total && slowest < Duration::from_secs(1),
        format!("{agree}/{total} match enumeration ({infeasible} infeasible), slowest solve {slowest:?}"),
    )
}

fn integer_only() -> Outcome {
    let mut graphs = vec![
        ("toy", calibrated_graph(zoo::toy_cnn(), 1, 8)),
        ("toy-4bit", calibrated_graph(zoo::toy_cnn(), 2, 4)),
        ("residual16", calibrated_graph(zoo::residual_network(7, 8, 8), 3, 4)),
    ];
    graphs.push(("witness", zoo::residual_rounding_witness()));
    let mut floats = 0;
    for (name, (g, x)) in &graphs {
        let a = infer_true(g, x).map_err(|e| format!("{name}: {e}"))?;
        let b = infer_true(g, x).map_err(|e| format!("{name}: {e}"))?;
        floats += a.ops.float_ops_in_window + b.ops.float_ops_in_window;
        let bytes = encode_container(&Tensor::Packed(a.codes.clone()));
        let reread = decode_container(&bytes).map_err(|e| e.to_string())?;
        if a.codes != b.codes || a.site_codes != b.site_codes || reread != Tensor::Packed(b.codes) {
            return Err(format!("{name}: outputs differ between runs"));
        }
    }
    check(
        floats == 0,
        format!("{} networks, {floats} float ops in the integer window, runs bit-identical", graphs.len()),
    )
}

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    for case in 0..1000 {
        let bits = [BitWidth::B4, BitWidth::B8][case % 2];
        let code = |rng: &mut ChaCha8Rng| rng.gen_range(bits.min_code()..=bits.max_code());
        if case % 4 < 2 {
            let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..6));
            let w: Vec<i32> = (0..m * k).map(|_| code(&mut rng)).collect();
            let h: Vec<i32> = (0..k * n).map(|_| code(&mut rng)).collect();
            let zh = code(&mut rng);
            let got = matmul_codes(&w, &h, m, k, n, zh, &mut OpCounter::new()).map_err(|e| e.to_string())?;
            for i in 0..m {
                for j in 0..n {
                    let want: i64 = (0..k).map(|t| w[i * k + t] as i64 * (h[t * n + j] as i64 - zh as i64)).sum();
                    if got[i * n + j] as i64 != want {
                        return Err(format!("matmul case {case} at ({i},{j})"));
                    }
                }
            }
        } else {
            let spec = ConvSpec {
                in_channels: rng.gen_range(1..4),
                out_channels: rng.gen_range(1..4),
                kernel_h: rng.gen_range(1..4),
                kernel_w: rng.gen_range(1..4),
                stride: rng.gen_range(1..3),
                padding: rng.gen_range(0..2),
            };
            let (n, h, wd) = (rng.gen_range(1..3), rng.gen_range(3..7), rng.gen_range(3..7));
            let w: Vec<i32> = (0..spec.out_channels * spec.patch_len()).map(|_| code(&mut rng)).collect();
            let x: Vec<i32> = (0..n * spec.in_channels * h * wd).map(|_| code(&mut rng)).collect();
            let zh = code(&mut rng);
            let (got, od) = conv2d_codes(&w, &x, [n, spec.in_channels, h, wd], &spec, zh, zh, &mut OpCounter::new())
                .map_err(|e| e.to_string())?;
            let mut idx = 0;
            for b in 0..n {
                for o in 0..spec.out_channels {
                    for oy in 0..od[2] {
                        for ox in 0..od[3] {
                            let mut want: i64 = 0;
                            for c in 0..spec.in_channels {
                                for ky in 0..spec.kernel_h {
                                    for kx in 0..spec.kernel_w {
                                        let iy = (oy * spec.stride + ky) as i64 - spec.padding as i64;
                                        let ix = (ox * spec.stride + kx) as i64 - spec.padding as i64;
                                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                            continue;
                                        }
                                        let xv = x[((b * spec.in_channels + c) * h + iy as usize) * wd + ix as usize];
                                        let wv =
                                            w[((o * spec.in_channels + c) * spec.kernel_h + ky) * spec.kernel_w + kx];
                                        want += wv as i64 * (xv as i64 - zh as i64);
                                    }
                                }
                            }
                            if got[idx] as i64 != want {
                                return Err(format!("conv case {case} at output {idx}"));
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        cases += 1;
    }
    // Every INT4 weight matrix against a 2x256 matrix holding every INT4
    // column. Output columns depend only on their input column, so this
    // covers all 16^8 products of two 2x2 INT4 matrices.
    let range: Vec<i32> = (BitWidth::B4.min_code()..=BitWidth::B4.max_code()).collect();
    let columns: Vec<(i32, i32)> = range.iter().flat_map(|&e| range.iter().map(move |&g| (e, g))).collect();
    let n = columns.len();
    let mut x = vec![0; 2 * n];
    for (j, &(e, g)) in columns.iter().enumerate() {
        x[j] = e;
        x[n + j] = g;
    }
    let x = pack(&x, BitWidth::B4, Shape::new(vec![2, n]).unwrap()).unwrap();
    let mut exhaustive = 0u64;
    for &a in &range {
        for &b in &range {
            for &c in &range {
                for &d in &range {
                    let w = pack(&[a, b, c, d], BitWidth::B4, Shape::new(vec![2, 2]).unwrap()).unwrap();
                    let got = int_matmul(&w, &x, 0).map_err(|e| e.to_string())?.data;
                    for (j, &(e, g)) in columns.iter().enumerate() {
                        if got[j] != a * e + b * g || got[n + j] != c * e + d * g {
                            return Err(format!("2x2x2 INT4 mismatch for w {:?}, column {:?}", [a, b, c, d], (e, g)));
                        }
                    }
                    exhaustive += 1;
                }
            }
        }
    }
    check(true, format!("{cases} random cases, {exhaustive} INT4 weight matrices against all 256 columns"))
}

fn bn_fold_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for layer in 0..100 {
        let (c, o, k) = (rng.gen_range(1..5), rng.gen_range(1..6), [1, 3][layer % 2]);
        let topology = Topology {
            name: "conv_bn".into(),
            nodes: vec![
                Node::new("input", Op::Input { shape: vec![2, c, 6, 6] }),
                Node::new(
                    "conv",
                    Op::Conv {
                        input: "input".into(),
                        out_channels: o,
                        kernel: k,
                        stride: 1,
                        padding: k / 2,
                        bias: layer % 3 == 0,
                        batch_norm: true,
                    },
                ),
            ],
        };
        let mut params = zoo::random_model(topology.clone(), layer as u64).params;
        let p: &mut LayerParams = params.get_mut("conv").unwrap();
        let bn = p.bn.as_mut().unwrap();
        for ch in 0..o {
            bn.mean[ch] = rng.gen_range(-1.0..1.0);
            bn.std[ch] = rng.gen_range(0.05..3.0);
            bn.scale[ch] = rng.gen_range(-2.0..2.0);
            bn.shift[ch] = rng.gen_range(-1.0..1.0);
        }
        let model = FloatModel::new(topology, params).map_err(|e| e.to_string())?;
        let folded = fold_bn(&model).map_err(|e| e.to_string())?;
        let x = zoo::random_input(&[2, c, 6, 6], 500 + layer as u64);
        let a = forward_float(&model, &x).map_err(|e| e.to_string())?.pop().unwrap();
        let b = forward_float(&folded, &x).map_err(|e| e.to_string())?.pop().unwrap();
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs() as f64));
        worst = worst.max(diff / scale);
    }
    check(worst <= 1e-5, format!("100 conv+BN layers, worst max-abs relative difference {worst:.2e}"))
}

/// `round(acc · ratio)` with ties away from zero, exact through the binary
/// expansion of the f64 ratio.
fn exact_round(acc: i64, ratio: f64) -> i64 {
    let bits = ratio.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
    let mantissa = ((bits & ((1u64 << 52) - 1)) | (1u64 << 52)) as i128;
    let prod = acc as i128 * mantissa;
    let shift = -exp as u32;
    let mag = (prod.abs() + (1i128 << (shift - 1))) >> shift;
    (if prod < 0 { -mag } else { mag }) as i64
}

fn dyadic_precision() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut exact, mut worst) = (0u64, 0i64);
    let total = 1_000_000u64;
    for _ in 0..total {
        let acc = rng.gen_range(-(1i32 << 20)..=(1i32 << 20));
        let ratio = 2f64.powf(rng.gen_range(-10.0..=0.0));
        let s = dn(ratio).map_err(|e| e.to_string())?;
        let err = (requantize(acc, s) as i64 - exact_round(acc as i64, ratio)).abs();
        worst = worst.max(err);
        exact += (err == 0) as u64;
    }
    let rate = exact as f64 / total as f64;
    check(worst <= 1 && rate >= 0.999, format!("{total} pairs, exact rate {:.5}, worst error {worst}", rate))
}

fn hutchinson() -> Outcome {
    let diag = [1.0, 2.0, 3.0];
    let est = hutchinson_trace(|w| w.iter().zip(diag).map(|(x, d)| x * d).collect(), &[0.0; 3], 1000, 9);
    let d = 16;
    let iso = hutchinson_samples(|w| w.iter().map(|x| 2.5 * x).collect(), &vec![0.0; d], 200, 9);
    let iso_exact = iso.iter().all(|&s| s == 2.5 * d as f64);
    check(
        within(est, 6.0, 0.05) && iso_exact,
        format!("diag(1,2,3) estimate {est:.4}, isotropic samples exact: {iso_exact}"),
    )
}

fn pack_roundtrip() -> Outcome {
    let mut pairs = 0;
    let nibbles = BitWidth::B4.min_code()..=BitWidth::B4.max_code();
    for a in nibbles.clone() {
        for b in nibbles.clone() {
            let t = pack(&[a, b], BitWidth::B4, Shape::new(vec![2]).unwrap()).map_err(|e| e.to_string())?;
            if unpack(&t) != [a, b] {
                return Err(format!("nibble pair ({a}, {b})"));
            }
            pairs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let total = 100_000;
    for i in 0..total {
        let bits = [BitWidth::B4, BitWidth::B8, BitWidth::B32][i % 3];
        let len = rng.gen_range(1..40);
        let v: Vec<i32> = (0..len).map(|_| rng.gen_range(bits.min_code()..=bits.max_code())).collect();
        let t = pack(&v, bits, Shape::new(vec![len]).unwrap()).map_err(|e| e.to_string())?;
        if unpack(&t) != v {
            return Err(format!("random tensor {i} ({}-bit, {len} values)", bits.bits()));
        }
    }
    check(true, format!("{pairs} nibble pairs, {total} random tensors"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("residual rounding witness", residual_rounding),
        ("divergence accumulates", divergence_trend),
        ("ResNet18 cost model", resnet18_costs),
        ("ILP matches enumeration", ilp_exactness),
        ("integer-only execution", integer_only),
        ("kernel oracles", kernel_oracles),
        ("BN folding identity", bn_fold_identity),
        ("dyadic precision", dyadic_precision),
        ("Hutchinson trace", hutchinson),
        ("pack/unpack roundtrip", pack_roundtrip),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
