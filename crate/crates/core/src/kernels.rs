//! Integer-only compute kernels: matmul, direct 2-D convolution, INT32
//! pooling and ReLU on codes. Low-precision operands, INT32 accumulation,
//! overflow is reported rather than saturated.

use crate::instrument::OpCounter;
use crate::tensor::{pack, BitWidth, PackedTensor, Shape, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("INT32 accumulator overflow")]
    AccumulatorOverflow,
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            out_dim(h, self.kernel_h, self.stride, self.padding)?,
            out_dim(w, self.kernel_w, self.stride, self.padding)?,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// `⌊(n + 2·pad − k) / stride⌋ + 1`, requiring at least one output.
pub fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(KernelError::Shape("stride must be at least 1".into()));
    }
    let padded = n + 2 * pad;
    if k == 0 || padded < k {
        return Err(KernelError::Shape(format!("window {k} does not fit input {n} with padding {pad}")));
    }
    Ok((padded - k) / stride + 1)
}

/// INT32 results awaiting requantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulator {
    pub shape: Shape,
    pub data: Vec<i32>,
}

impl Accumulator {
    pub fn into_packed(self) -> PackedTensor {
        PackedTensor::from_words(self.shape, BitWidth::B32, self.data).expect("accumulator words")
    }
}

#[inline]
fn mac(acc: i32, w: i32, x: i32) -> Result<i32> {
    w.checked_mul(x).and_then(|p| acc.checked_add(p)).ok_or(KernelError::AccumulatorOverflow)
}

#[inline]
fn centered(x: i32, offset: i32) -> Result<i32> {
    x.checked_sub(offset).ok_or(KernelError::AccumulatorOverflow)
}

/// `out[i, j] = Σ_k w[i, k] · (h[k, j] − offset)` on row-major slices.
pub fn matmul_codes(
    w: &[i32],
    h: &[i32],
    m: usize,
    k: usize,
    n: usize,
    offset: i32,
    counter: &mut OpCounter,
) -> Result<Vec<i32>> {
    if w.len() != m * k || h.len() != k * n {
        return Err(KernelError::Shape(format!(
            "matmul operands of length {} and {} for {m}x{k} · {k}x{n}",
            w.len(),
            h.len()
        )));
    }
    let hc = h.iter().map(|&x| centered(x, offset)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let row = &w[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0i32;
            for (kk, &wv) in row.iter().enumerate() {
                acc = mac(acc, wv, hc[kk * n + j])?;
            }
            out[i * n + j] = acc;
        }
    }
    let macs = (m * n * k) as u64;
    counter.int_mul(macs);
    counter.int_add(macs + if offset != 0 { h.len() as u64 } else { 0 });
    Ok(out)
}

pub fn int_matmul(qw: &PackedTensor, qh: &PackedTensor, zh: i32) -> Result<Accumulator> {
    int_matmul_counted(qw, qh, zh, &mut OpCounter::new())
}

pub fn int_matmul_counted(
    qw: &PackedTensor,
    qh: &PackedTensor,
    zh: i32,
    counter: &mut OpCounter,
) -> Result<Accumulator> {
    let (wd, hd) = (qw.dims(), qh.dims());
    if wd.len() != 2 || hd.len() != 2 || wd[1] != hd[0] {
        return Err(KernelError::Shape(format!("cannot multiply {:?} by {:?}", wd, hd)));
    }
    let (m, k, n) = (wd[0], wd[1], hd[1]);
    let data = matmul_codes(&qw.to_vec(), &qh.to_vec(), m, k, n, zh, counter)?;
    Ok(Accumulator { shape: Shape::new(vec![m, n])?, data })
}

/// Direct convolution on NCHW codes, weights `[O, I, kh, kw]`.
///
/// Computes `Σ w · (x − offset)` where out-of-bounds inputs read as `pad`.
/// With `pad == offset` padding contributes exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_codes(
    w: &[i32],
    x: &[i32],
    input_dims: [usize; 4],
    spec: &ConvSpec,
    offset: i32,
    pad: i32,
    counter: &mut OpCounter,
) -> Result<(Vec<i32>, [usize; 4])> {
    let [n, c, h, wd] = input_dims;
    if c != spec.in_channels {
        return Err(KernelError::Shape(format!("input has {c} channels, conv expects {}", spec.in_channels)));
    }
    if w.len() != spec.out_channels * spec.patch_len() || x.len() != n * c * h * wd {
        return Err(KernelError::Shape("conv operand lengths do not match the spec".into()));
    }
    let (oh, ow) = spec.output_hw(h, wd)?;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let xc = x.iter().map(|&v| centered(v, offset)).collect::<Result<Vec<_>>>()?;
    let pad_c = centered(pad, offset)?;
    let mut out = vec![0i32; n * spec.out_channels * oh * ow];
    let mut idx = 0;
    for b in 0..n {
        for o in 0..spec.out_channels {
            let wo = &w[o * spec.patch_len()..(o + 1) * spec.patch_len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            for kx in 0..kw {
                                let ix = (ox * s + kx) as isize - p as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    pad_c
                                } else {
                                    xc[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                };
                                acc = mac(acc, wo[(ci * kh + ky) * kw + kx], v)?;
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    let macs = (out.len() * spec.patch_len()) as u64;
    counter.int_mul(macs);
    counter.int_add(macs + if offset != 0 { x.len() as u64 } else { 0 });
    counter.compare(4 * macs);
    Ok((out, [n, spec.out_channels, oh, ow]))
}

pub fn int_conv2d(qw: &PackedTensor, qh: &PackedTensor, spec: &ConvSpec, zh: i32) -> Result<Accumulator> {
    int_conv2d_counted(qw, qh, spec, zh, &mut OpCounter::new())
}

pub fn int_conv2d_counted(
    qw: &PackedTensor,
    qh: &PackedTensor,
    spec: &ConvSpec,
    zh: i32,
    counter: &mut OpCounter,
) -> Result<Accumulator> {
    let wd = qw.dims();
    if wd != [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w] {
        return Err(KernelError::Shape(format!("weight shape {:?} does not match {:?}", wd, spec)));
    }
    let dims: [usize; 4] = qh
        .dims()
        .try_into()
        .map_err(|_| KernelError::Shape(format!("conv input must be rank 4, got {:?}", qh.dims())))?;
    let (data, od) = conv2d_codes(&qw.to_vec(), &qh.to_vec(), dims, spec, zh, zh, counter)?;
    Ok(Accumulator { shape: Shape::new(od.to_vec())?, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    /// Window sum; the `1 / area` factor belongs to the downstream rescale.
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl PoolSpec {
    pub fn area(&self) -> usize {
        self.window * self.window
    }
}

/// INT32 pooling on NCHW values. Max ignores padded positions; avg sums with
/// padded positions contributing zero.
pub fn pool_values(
    x: &[i32],
    dims: [usize; 4],
    spec: &PoolSpec,
    counter: &mut OpCounter,
) -> Result<(Vec<i32>, [usize; 4])> {
    let [n, c, h, w] = dims;
    if x.len() != n * c * h * w {
        return Err(KernelError::Shape(format!("{} values for pool input {:?}", x.len(), dims)));
    }
    let oh = out_dim(h, spec.window, spec.stride, spec.padding)?;
    let ow = out_dim(w, spec.window, spec.stride, spec.padding)?;
    if spec.padding >= spec.window {
        return Err(KernelError::Shape("pool padding must be smaller than the window".into()));
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * spec.stride) as isize - spec.padding as isize;
                let x0 = (ox * spec.stride) as isize - spec.padding as isize;
                let ys = y0.max(0) as usize..((y0 + spec.window as isize).min(h as isize)) as usize;
                let xs = x0.max(0) as usize..((x0 + spec.window as isize).min(w as isize)) as usize;
                let mut cells = ys.flat_map(|y| xs.clone().map(move |xx| plane[y * w + xx]));
                let v = match spec.kind {
                    PoolKind::Max => cells.max().expect("window overlaps the input"),
                    PoolKind::Avg => {
                        cells.try_fold(0i32, |a, v| a.checked_add(v)).ok_or(KernelError::AccumulatorOverflow)?
                    }
                };
                out.push(v);
            }
        }
    }
    let work = (out.len() * spec.area()) as u64;
    match spec.kind {
        PoolKind::Max => counter.compare(work),
        PoolKind::Avg => counter.int_add(work),
    }
    Ok((out, [n, c, oh, ow]))
}

pub fn pool_int32(t: &PackedTensor, spec: &PoolSpec) -> Result<PackedTensor> {
    let dims: [usize; 4] = t
        .dims()
        .try_into()
        .map_err(|_| KernelError::Shape(format!("pool input must be rank 4, got {:?}", t.dims())))?;
    let (out, od) = pool_values(&t.to_vec(), dims, spec, &mut OpCounter::new())?;
    Ok(pack(&out, BitWidth::B32, Shape::new(od.to_vec())?)?)
}

/// `max(q, z)` elementwise, where `z` is the code of real 0.
pub fn relu_codes(q: &[i32], zero_code: i32) -> Vec<i32> {
    q.iter().map(|&v| v.max(zero_code)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::{dn, requantize};
    use crate::quantizer::QuantParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn packed(v: &[i32], bits: BitWidth, dims: &[usize]) -> PackedTensor {
        pack(v, bits, Shape::new(dims.to_vec()).unwrap()).unwrap()
    }

    fn ref_matmul(w: &[i32], h: &[i32], m: usize, k: usize, n: usize, zh: i32) -> Vec<i64> {
        let mut out = vec![0i64; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += w[i * k + kk] as i64 * (h[kk * n + j] as i64 - zh as i64);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_hand_example() {
        let w = packed(&[1, 2, 3, 4], BitWidth::B4, &[2, 2]);
        let h = packed(&[1, 1], BitWidth::B4, &[2, 1]);
        assert_eq!(int_matmul(&w, &h, 0).unwrap().data, vec![3, 7]);
    }

    #[test]
    fn matmul_identity() {
        let w = packed(&[1, 0, 0, 1], BitWidth::B8, &[2, 2]);
        let hv = [5, -3, 7, 100, -128, 0];
        let h = packed(&hv, BitWidth::B8, &[2, 3]);
        assert_eq!(int_matmul(&w, &h, 0).unwrap().data, hv);
    }

    #[test]
    fn matmul_random_int4_with_zero_point() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<i32> = (0..8 * 16).map(|_| rng.gen_range(-8..=7)).collect();
        let h: Vec<i32> = (0..16 * 4).map(|_| rng.gen_range(-8..=7)).collect();
        let got = int_matmul(&packed(&w, BitWidth::B4, &[8, 16]), &packed(&h, BitWidth::B4, &[16, 4]), -8).unwrap();
        let want = ref_matmul(&w, &h, 8, 16, 4, -8);
        assert_eq!(got.data.iter().map(|&v| v as i64).collect::<Vec<_>>(), want);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let w = packed(&[1, 2, 3, 4], BitWidth::B8, &[2, 2]);
        let h = packed(&[1, 1, 1], BitWidth::B8, &[3, 1]);
        assert!(matches!(int_matmul(&w, &h, 0), Err(KernelError::Shape(_))));
    }

    #[test]
    fn overflow_is_an_error() {
        let w = packed(&[i32::MAX, i32::MAX], BitWidth::B32, &[1, 2]);
        let h = packed(&[1, 1], BitWidth::B32, &[2, 1]);
        assert!(matches!(int_matmul(&w, &h, 0), Err(KernelError::AccumulatorOverflow)));
    }

    #[test]
    fn conv_1x1_is_matmul() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (ci, co, hw) = (6, 5, 4);
        let w: Vec<i32> = (0..co * ci).map(|_| rng.gen_range(-8..=7)).collect();
        let x: Vec<i32> = (0..ci * hw * hw).map(|_| rng.gen_range(-8..=7)).collect();
        let spec = ConvSpec { in_channels: ci, out_channels: co, kernel_h: 1, kernel_w: 1, stride: 1, padding: 0 };
        let conv = int_conv2d(
            &packed(&w, BitWidth::B4, &[co, ci, 1, 1]),
            &packed(&x, BitWidth::B4, &[1, ci, hw, hw]),
            &spec,
            -8,
        )
        .unwrap();
        let mm =
            int_matmul(&packed(&w, BitWidth::B4, &[co, ci]), &packed(&x, BitWidth::B4, &[ci, hw * hw]), -8).unwrap();
        assert_eq!(conv.data, mm.data);
    }

    #[test]
    fn zero_weights_give_zero() {
        let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 };
        let w = packed(&[0; 54], BitWidth::B4, &[3, 2, 3, 3]);
        let x = packed(&[5; 32], BitWidth::B8, &[1, 2, 4, 4]);
        let out = int_conv2d(&w, &x, &spec, 3).unwrap();
        assert!(out.data.iter().all(|&v| v == 0));
        assert_eq!(out.shape.dims(), &[1, 3, 4, 4]);
    }

    #[test]
    fn padding_contributes_real_zero() {
        // every input equals the zero point, so the padded border must also vanish
        let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 };
        let w = packed(&[1; 9], BitWidth::B4, &[1, 1, 3, 3]);
        let x = packed(&[-8; 9], BitWidth::B4, &[1, 1, 3, 3]);
        assert!(int_conv2d(&w, &x, &spec, -8).unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn pooling_examples() {
        let t = packed(&[1, 2, 3, 4], BitWidth::B32, &[1, 1, 2, 2]);
        let max = PoolSpec { kind: PoolKind::Max, window: 2, stride: 2, padding: 0 };
        assert_eq!(pool_int32(&t, &max).unwrap().to_vec(), vec![4]);
        let avg = PoolSpec { kind: PoolKind::Avg, ..max };
        let sum = pool_int32(&t, &avg).unwrap().to_vec();
        assert_eq!(sum, vec![10]);
        let quarter = dn(1.0 / avg.area() as f64).unwrap();
        assert_eq!(quarter, crate::dyadic::DyadicScale { mantissa: 1, shift: 2 });
        assert_eq!(requantize(sum[0], quarter), 3);
    }

    fn ref_pool(x: &[i32], [n, c, h, w]: [usize; 4], spec: &PoolSpec) -> Vec<i32> {
        let oh = (h + 2 * spec.padding - spec.window) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - spec.window) / spec.stride + 1;
        let mut out = vec![];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals = vec![];
                    for dy in 0..spec.window {
                        for dx in 0..spec.window {
                            let y = (oy * spec.stride + dy) as i64 - spec.padding as i64;
                            let xx = (ox * spec.stride + dx) as i64 - spec.padding as i64;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                vals.push(x[p * h * w + y as usize * w + xx as usize]);
                            }
                        }
                    }
                    out.push(match spec.kind {
                        PoolKind::Max => *vals.iter().max().unwrap(),
                        PoolKind::Avg => vals.iter().sum(),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn pooling_matches_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let dims = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(3..10), rng.gen_range(3..10)];
            let x: Vec<i32> = (0..dims.iter().product()).map(|_| rng.gen_range(-100_000..100_000)).collect();
            let kind = if trial % 2 == 0 { PoolKind::Max } else { PoolKind::Avg };
            let spec = PoolSpec { kind, window: 3, stride: 2, padding: trial % 2 };
            let (got, _) = pool_values(&x, dims, &spec, &mut OpCounter::new()).unwrap();
            assert_eq!(got, ref_pool(&x, dims, &spec));
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_codes(&[-5, 0, 5], 0), vec![0, 0, 5]);
        assert_eq!(relu_codes(&[-128, -100], -128), vec![-128, -100]);
    }

    proptest! {
        #[test]
        fn relu_commutes_with_dequantize(codes in prop::collection::vec(-8i32..=7, 1..50), z in -8i32..=7, s in 0.01f64..2.0) {
            let p = QuantParams::per_tensor(s, z, BitWidth::B4);
            for (&q, r) in codes.iter().zip(relu_codes(&codes, z)) {
                prop_assert_eq!(p.real(r, 0), p.real(q, 0).max(0.0));
            }
        }

        #[test]
        fn zero_point_correction_identity(
            w in prop::collection::vec(-8i32..=7, 12),
            h in prop::collection::vec(-8i32..=7, 8),
            zh in -8i32..=7,
        ) {
            let direct = matmul_codes(&w, &h, 3, 4, 2, zh, &mut OpCounter::new()).unwrap();
            let shifted: Vec<i32> = h.iter().map(|&v| v - zh).collect();
            let pre = matmul_codes(&w, &shifted, 3, 4, 2, 0, &mut OpCounter::new()).unwrap();
            prop_assert_eq!(direct, pre);
        }
    }
}
