//! Dense tensors, signed integer bit-packing, and the binary tensor container.
//!
//! Float tensors hold row-major `f32` data. Integer tensors are stored packed
//! into 32-bit words: eight 4-bit codes, four 8-bit codes or one 32-bit code per
//! word, with element `i` living in the bit-field starting at
//! `bits * (i % per_word)` of word `i / per_word`.

mod container;
mod packing;

pub use container::{decode_container, encode_container, read_container, write_container, Tensor};
pub use packing::{pack, unpack};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("value {value} at index {index} is outside the signed {bits}-bit range")]
    Range { index: usize, value: i64, bits: u32 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bad tensor container: {0}")]
    Format(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Tensor dimensions. NCHW for rank 4, `[rows, cols]` for rank 2.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if !matches!(dims.len(), 1 | 2 | 4) {
            return Err(TensorError::Shape(format!("rank {} not in {{1, 2, 4}}", dims.len())));
        }
        if dims.contains(&0) {
            return Err(TensorError::Shape(format!("zero-sized dimension in {:?}", dims)));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn volume(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = TensorError;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Storage width of an integer tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B4,
    B8,
    B32,
}

impl BitWidth {
    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            4 => Some(BitWidth::B4),
            8 => Some(BitWidth::B8),
            32 => Some(BitWidth::B32),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::B32 => 32,
        }
    }

    /// Smallest representable signed code.
    pub fn min_code(self) -> i32 {
        match self {
            BitWidth::B32 => i32::MIN,
            b => -(1 << (b.bits() - 1)),
        }
    }

    /// Largest representable signed code.
    pub fn max_code(self) -> i32 {
        match self {
            BitWidth::B32 => i32::MAX,
            b => (1 << (b.bits() - 1)) - 1,
        }
    }

    pub fn per_word(self) -> usize {
        (32 / self.bits()) as usize
    }

    pub fn words_for(self, len: usize) -> usize {
        len.div_ceil(self.per_word())
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = String;
    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        BitWidth::from_bits(bits).ok_or_else(|| format!("unsupported bit-width {bits}"))
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(TensorError::Shape(format!(
                "{} values for shape {} (volume {})",
                data.len(),
                shape,
                shape.volume()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        FloatTensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.volume();
        FloatTensor { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(min, max)` over all elements.
    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.volume() != self.shape.volume() {
            return Err(TensorError::Shape(format!("cannot reshape {} into {}", self.shape, shape)));
        }
        Ok(FloatTensor { shape, data: self.data })
    }
}

/// Integer tensor packed into 32-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    shape: Shape,
    bits: BitWidth,
    words: Vec<i32>,
}

impl PackedTensor {
    /// Wraps already-packed words; checks the word count and zero padding.
    pub fn from_words(shape: Shape, bits: BitWidth, words: Vec<i32>) -> Result<Self> {
        let n = shape.volume();
        let expected = bits.words_for(n);
        if words.len() != expected {
            return Err(TensorError::Shape(format!(
                "{} words for {} {}-bit elements (expected {})",
                words.len(),
                n,
                bits,
                expected
            )));
        }
        let used = n % bits.per_word();
        if used != 0 {
            let last = words[expected - 1] as u32;
            if last >> (used as u32 * bits.bits()) != 0 {
                return Err(TensorError::Format("non-zero padding in final word".into()));
            }
        }
        Ok(PackedTensor { shape, bits, words })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn words(&self) -> &[i32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.shape.volume()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sign-extended element `i`.
    pub fn get(&self, i: usize) -> i32 {
        packing::extract(&self.words, self.bits, i)
    }

    pub fn to_vec(&self) -> Vec<i32> {
        unpack(self)
    }
}
