//! FP32 reference operators shared by the float forward pass and the
//! simulated-quantization executor.

use crate::kernels::{ConvSpec, PoolKind, PoolSpec};

pub(crate) fn conv2d(
    w: &[f32],
    bias: Option<&[f32]>,
    x: &[f32],
    dims: [usize; 4],
    spec: &ConvSpec,
) -> (Vec<f32>, [usize; 4]) {
    let [n, c, h, wd] = dims;
    let (oh, ow) = spec.output_hw(h, wd).expect("validated conv geometry");
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let patch = spec.patch_len();
    let mut out = Vec::with_capacity(n * spec.out_channels * oh * ow);
    for b in 0..n {
        for o in 0..spec.out_channels {
            let wo = &w[o * patch..(o + 1) * patch];
            let b0 = bias.map_or(0.0, |bv| bv[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wo[(ci * kh + ky) * kw + kx]
                                    * x[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.push(acc + b0);
                }
            }
        }
    }
    (out, [n, spec.out_channels, oh, ow])
}

/// `x [N, K]`, `w [O, K]` → `[N, O]`.
pub(crate) fn fc(w: &[f32], bias: Option<&[f32]>, x: &[f32], n: usize, k: usize, o: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * o);
    for row in x.chunks(k).take(n) {
        for j in 0..o {
            let acc: f32 = w[j * k..(j + 1) * k].iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(acc + bias.map_or(0.0, |bv| bv[j]));
        }
    }
    out
}

pub(crate) fn pool(x: &[f32], dims: [usize; 4], spec: &PoolSpec) -> (Vec<f32>, [usize; 4]) {
    let [n, c, h, w] = dims;
    let oh = (h + 2 * spec.padding - spec.window) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - spec.window) / spec.stride + 1;
    let area = spec.area() as f32;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                let mut best = f32::NEG_INFINITY;
                let mut sum = 0.0f32;
                for y in y0.max(0)..(y0 + spec.window as isize).min(h as isize) {
                    for xx in x0.max(0)..(x0 + spec.window as isize).min(w as isize) {
                        let v = plane[y as usize * w + xx as usize];
                        best = best.max(v);
                        sum += v;
                    }
                }
                out.push(match spec.kind {
                    PoolKind::Max => best,
                    PoolKind::Avg => sum / area,
                });
            }
        }
    }
    (out, [n, c, oh, ow])
}
