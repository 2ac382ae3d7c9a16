//! Binary tensor container.
//!
//! ```text
//! magic "DYQT" | version u16 = 1 | dtype u8 (0 = f32, 1 = packed int)
//! | bits u8 (0 for f32, else 4/8/32) | rank u8 | 3 reserved bytes
//! | dims u32[rank] | payload (f32[] or 32-bit words)
//! ```
//! Every multi-byte field is little-endian.

use super::{BitWidth, FloatTensor, PackedTensor, Result, Shape, TensorError};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DYQT";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_PACKED: u8 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Float(FloatTensor),
    Packed(PackedTensor),
}

impl Tensor {
    pub fn shape(&self) -> &Shape {
        match self {
            Tensor::Float(t) => t.shape(),
            Tensor::Packed(t) => t.shape(),
        }
    }

    pub fn into_float(self) -> Result<FloatTensor> {
        match self {
            Tensor::Float(t) => Ok(t),
            Tensor::Packed(_) => Err(TensorError::Format("expected an f32 tensor, found packed integers".into())),
        }
    }

    pub fn into_packed(self) -> Result<PackedTensor> {
        match self {
            Tensor::Packed(t) => Ok(t),
            Tensor::Float(_) => Err(TensorError::Format("expected packed integers, found an f32 tensor".into())),
        }
    }
}

impl From<FloatTensor> for Tensor {
    fn from(t: FloatTensor) -> Self {
        Tensor::Float(t)
    }
}

impl From<PackedTensor> for Tensor {
    fn from(t: PackedTensor) -> Self {
        Tensor::Packed(t)
    }
}

pub fn encode_container(tensor: &Tensor) -> Vec<u8> {
    let shape = tensor.shape();
    let (dtype, bits, payload_words) = match tensor {
        Tensor::Float(t) => (DTYPE_F32, 0u8, t.len()),
        Tensor::Packed(t) => (DTYPE_PACKED, t.bits().bits() as u8, t.words().len()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * shape.rank() + 4 * payload_words);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(bits);
    out.push(shape.rank() as u8);
    out.extend_from_slice(&[0u8; 3]);
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match tensor {
        Tensor::Float(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::Packed(t) => t.words().iter().for_each(|w| out.extend_from_slice(&w.to_le_bytes())),
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<Tensor> {
    let fmt = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(fmt("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let (dtype, bits, rank) = (bytes[6], bytes[7], bytes[8] as usize);
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fmt("truncated dims"));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let shape = Shape::new(dims)?;
    let payload = &bytes[dims_end..];
    let words: Vec<[u8; 4]> = payload.chunks_exact(4).map(|c| c.try_into().unwrap()).collect();
    if !payload.len().is_multiple_of(4) {
        return Err(fmt("payload not a multiple of 4 bytes"));
    }
    match dtype {
        DTYPE_F32 => {
            if bits != 0 {
                return Err(fmt("f32 tensor must declare bits = 0"));
            }
            if words.len() != shape.volume() {
                return Err(TensorError::Format(format!(
                    "payload has {} floats, shape {} needs {}",
                    words.len(),
                    shape,
                    shape.volume()
                )));
            }
            let data = words.into_iter().map(f32::from_le_bytes).collect();
            Ok(Tensor::Float(FloatTensor::new(shape, data)?))
        }
        DTYPE_PACKED => {
            let bits = BitWidth::from_bits(bits as u32)
                .ok_or_else(|| TensorError::Format(format!("unsupported bit-width {bits}")))?;
            let words = words.into_iter().map(i32::from_le_bytes).collect();
            Ok(Tensor::Packed(PackedTensor::from_words(shape, bits, words).map_err(|e| match e {
                TensorError::Shape(m) => TensorError::Format(m),
                other => other,
            })?))
        }
        other => Err(TensorError::Format(format!("unknown dtype {other}"))),
    }
}

pub fn write_container(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_container(tensor))?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_container(&fs::read(path)?)
}
