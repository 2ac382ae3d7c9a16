//! Uniform quantization: symmetric (weights) and asymmetric (activations)
//! parameters, quantize / dequantize, and static range calibration.
//!
//! Codes are always stored signed. The zero point `Z` is the code that
//! represents real 0, so `q = clamp(round(r / S) + Z)` and `r ≈ S · (q − Z)`.
//! Rounding is to nearest with ties away from zero.

use crate::instrument::OpCounter;
use crate::tensor::{pack, BitWidth, FloatTensor, PackedTensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("degenerate range [{r_min}, {r_max}]")]
    DegenerateRange { r_min: f64, r_max: f64 },
    #[error("unsupported quantization bit-width {0}")]
    UnsupportedBits(u32),
    #[error("invalid range [{r_min}, {r_max}]")]
    InvalidRange { r_min: f64, r_max: f64 },
    #[error("parameters do not match tensor: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per slice along the output-channel axis (axis 0).
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f64>,
    pub zero_point: i32,
    pub bits: BitWidth,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero_point: i32, bits: BitWidth) -> Self {
        QuantParams { scales: vec![scale], zero_point, bits, granularity: Granularity::PerTensor }
    }

    /// Symmetric per-tensor parameters (`Z = 0`).
    pub fn symmetric(r_min: f64, r_max: f64, bits: BitWidth) -> Result<Self> {
        Ok(Self::per_tensor(symmetric_scale(r_min, r_max, bits)?, 0, bits))
    }

    /// Asymmetric per-tensor parameters over `[r_min, r_max]` widened to include 0.
    pub fn asymmetric(r_min: f64, r_max: f64, bits: BitWidth) -> Result<Self> {
        let (scale, zero_point) = asymmetric_params(r_min, r_max, bits)?;
        Ok(Self::per_tensor(scale, zero_point, bits))
    }

    /// Scale of a per-tensor parameter set.
    pub fn scale(&self) -> f64 {
        self.scales[0]
    }

    pub fn channel_scale(&self, channel: usize) -> f64 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[channel],
        }
    }

    /// Dequantizes a single code.
    #[inline]
    pub fn real(&self, code: i32, channel: usize) -> f64 {
        (code as i64 - self.zero_point as i64) as f64 * self.channel_scale(channel)
    }

    /// Quantizes a single value, saturating at the code range.
    #[inline]
    pub fn code(&self, r: f64, channel: usize) -> i32 {
        let q = (r / self.channel_scale(channel)).round() + self.zero_point as f64;
        q.clamp(self.bits.min_code() as f64, self.bits.max_code() as f64) as i32
    }

    fn check_tensor(&self, dims: &[usize]) -> Result<usize> {
        match self.granularity {
            Granularity::PerTensor if self.scales.len() == 1 => Ok(1),
            Granularity::PerChannel if self.scales.len() == dims[0] => Ok(dims[0]),
            _ => Err(QuantError::Mismatch(format!(
                "{} scales ({:?}) for tensor of shape {:?}",
                self.scales.len(),
                self.granularity,
                dims
            ))),
        }
    }
}

fn levels(bits: BitWidth) -> Result<f64> {
    match bits {
        BitWidth::B4 | BitWidth::B8 => Ok(((1u32 << bits.bits()) - 1) as f64),
        BitWidth::B32 => Err(QuantError::UnsupportedBits(32)),
    }
}

fn check_range(r_min: f64, r_max: f64) -> Result<()> {
    if !r_min.is_finite() || !r_max.is_finite() || r_min > r_max {
        return Err(QuantError::InvalidRange { r_min, r_max });
    }
    Ok(())
}

/// `S = 2·max(|r_min|, |r_max|) / (2^b − 1)`.
pub fn symmetric_scale(r_min: f64, r_max: f64, bits: BitWidth) -> Result<f64> {
    let levels = levels(bits)?;
    check_range(r_min, r_max)?;
    let m = r_min.abs().max(r_max.abs());
    if m == 0.0 {
        return Err(QuantError::DegenerateRange { r_min, r_max });
    }
    Ok(2.0 * m / levels)
}

/// `S = (r_max − r_min) / (2^b − 1)` and the signed code of real 0.
pub fn asymmetric_params(r_min: f64, r_max: f64, bits: BitWidth) -> Result<(f64, i32)> {
    let levels = levels(bits)?;
    check_range(r_min, r_max)?;
    if r_min == r_max {
        return Err(QuantError::DegenerateRange { r_min, r_max });
    }
    let (lo, hi) = (r_min.min(0.0), r_max.max(0.0));
    let scale = (hi - lo) / levels;
    let zero_point = (-lo / scale).round() as i32 - (1 << (bits.bits() - 1));
    Ok((scale, zero_point.clamp(bits.min_code(), bits.max_code())))
}

/// Symmetric per-output-channel weight parameters. All-zero channels get scale 1.
pub fn per_channel_symmetric(w: &FloatTensor, bits: BitWidth) -> Result<QuantParams> {
    let channels = w.dims()[0];
    let per = w.len() / channels;
    let scales = w
        .data()
        .chunks(per)
        .enumerate()
        .map(|(c, chunk)| {
            let m = chunk.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            if m == 0.0 {
                log::warn!("channel {c} is all zero; using scale 1");
                Ok(1.0)
            } else {
                symmetric_scale(-m, m, bits)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantParams { scales, zero_point: 0, bits, granularity: Granularity::PerChannel })
}

pub fn quantize(r: &FloatTensor, p: &QuantParams) -> Result<PackedTensor> {
    let codes = quantize_codes(r, p)?;
    Ok(pack(&codes, p.bits, r.shape().clone())?)
}

/// Quantize and record the floating-point work in `counter`.
pub fn quantize_counted(r: &FloatTensor, p: &QuantParams, counter: &mut OpCounter) -> Result<PackedTensor> {
    // divide, round, add
    counter.float(3 * r.len() as u64);
    quantize(r, p)
}

pub fn quantize_codes(r: &FloatTensor, p: &QuantParams) -> Result<Vec<i32>> {
    let channels = p.check_tensor(r.dims())?;
    let per = r.len() / channels;
    Ok(r.data().iter().enumerate().map(|(i, &v)| p.code(v as f64, i / per)).collect())
}

pub fn dequantize(q: &PackedTensor, p: &QuantParams) -> Result<FloatTensor> {
    dequantize_codes(&q.to_vec(), q.dims(), p)
}

pub fn dequantize_counted(q: &PackedTensor, p: &QuantParams, counter: &mut OpCounter) -> Result<FloatTensor> {
    counter.float(2 * q.len() as u64);
    dequantize(q, p)
}

pub fn dequantize_codes(codes: &[i32], dims: &[usize], p: &QuantParams) -> Result<FloatTensor> {
    let channels = p.check_tensor(dims)?;
    let per = codes.len() / channels;
    let data = codes.iter().enumerate().map(|(i, &q)| p.real(q, i / per) as f32).collect();
    Ok(FloatTensor::from_vec(dims.to_vec(), data)?)
}

/// Calibrated activation range of one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibRange {
    pub r_min: f64,
    pub r_max: f64,
}

/// Momentum-tracked activation range. The first batch seeds the range.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTracker {
    pub running_min: f64,
    pub running_max: f64,
    pub momentum: f64,
    pub observed: bool,
}

impl Default for RangeTracker {
    fn default() -> Self {
        RangeTracker::new(DEFAULT_MOMENTUM)
    }
}

impl RangeTracker {
    pub fn new(momentum: f64) -> Self {
        assert!(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
        RangeTracker { running_min: 0.0, running_max: 0.0, momentum, observed: false }
    }

    pub fn observe(&mut self, batch_min: f64, batch_max: f64) {
        if self.observed {
            let m = self.momentum;
            self.running_min = m * self.running_min + (1.0 - m) * batch_min;
            self.running_max = m * self.running_max + (1.0 - m) * batch_max;
        } else {
            self.running_min = batch_min;
            self.running_max = batch_max;
            self.observed = true;
        }
    }

    pub fn track(&mut self, batch: &FloatTensor) {
        let (lo, hi) = batch.min_max();
        self.observe(lo as f64, hi as f64);
    }

    /// Final range, widened so real 0 is inside it.
    pub fn finalize(&self) -> Option<CalibRange> {
        self.observed.then(|| CalibRange { r_min: self.running_min.min(0.0), r_max: self.running_max.max(0.0) })
    }
}
