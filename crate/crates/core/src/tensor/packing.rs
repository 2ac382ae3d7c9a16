use super::{BitWidth, PackedTensor, Result, Shape, TensorError};

/// Packs signed integers into 32-bit words at the given width.
pub fn pack(values: &[i32], bits: BitWidth, shape: Shape) -> Result<PackedTensor> {
    if values.len() != shape.volume() {
        return Err(TensorError::Shape(format!(
            "{} values for shape {} (volume {})",
            values.len(),
            shape,
            shape.volume()
        )));
    }
    let (lo, hi) = (bits.min_code(), bits.max_code());
    if let Some(i) = values.iter().position(|&v| v < lo || v > hi) {
        return Err(TensorError::Range { index: i, value: values[i] as i64, bits: bits.bits() });
    }
    let words = match bits {
        BitWidth::B32 => values.to_vec(),
        _ => {
            let width = bits.bits();
            let mask = (1u32 << width) - 1;
            let mut words = vec![0i32; bits.words_for(values.len())];
            for (chunk, word) in values.chunks(bits.per_word()).zip(words.iter_mut()) {
                let mut w = 0u32;
                for (slot, &v) in chunk.iter().enumerate() {
                    w |= (v as u32 & mask) << (slot as u32 * width);
                }
                *word = w as i32;
            }
            words
        }
    };
    Ok(PackedTensor { shape, bits, words })
}

/// Unpacks every element, sign-extending sub-word fields.
pub fn unpack(t: &PackedTensor) -> Vec<i32> {
    match t.bits {
        BitWidth::B32 => t.words.clone(),
        bits => (0..t.len()).map(|i| extract(&t.words, bits, i)).collect(),
    }
}

#[inline]
pub(super) fn extract(words: &[i32], bits: BitWidth, i: usize) -> i32 {
    match bits {
        BitWidth::B32 => words[i],
        _ => {
            let width = bits.bits();
            let per = bits.per_word();
            let word = words[i / per] as u32;
            let field = word >> ((i % per) as u32 * width);
            // shift the field to the top then arithmetic-shift back to sign-extend
            ((field << (32 - width)) as i32) >> (32 - width)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize) -> Shape {
        Shape::new(vec![n]).unwrap()
    }

    #[test]
    fn eight_nibbles_fill_one_word() {
        let v = [-8, 7, 0, 1, 2, 3, 4, 5];
        let t = pack(&v, BitWidth::B4, shape(8)).unwrap();
        assert_eq!(t.words().len(), 1);
        assert_eq!(unpack(&t), v);
    }

    #[test]
    fn zeros_pack_to_zero_words() {
        let t = pack(&[0; 16], BitWidth::B4, shape(16)).unwrap();
        assert_eq!(t.words(), &[0, 0]);
    }

    #[test]
    fn nibble_sign_extension() {
        let t = pack(&[-1], BitWidth::B4, shape(1)).unwrap();
        assert_eq!(t.words(), &[0xF]);
        assert_eq!(unpack(&t), vec![-1]);
    }

    #[test]
    fn byte_endpoints() {
        let t = pack(&[127, -128], BitWidth::B8, shape(2)).unwrap();
        assert_eq!(unpack(&t), vec![127, -128]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            pack(&[0, 8], BitWidth::B4, shape(2)),
            Err(TensorError::Range { index: 1, value: 8, bits: 4 })
        ));
        assert!(matches!(pack(&[-129], BitWidth::B8, shape(1)), Err(TensorError::Range { .. })));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(pack(&[1, 2, 3], BitWidth::B8, shape(4)), Err(TensorError::Shape(_))));
    }

    #[test]
    fn one_hot_positions() {
        for bits in [BitWidth::B4, BitWidth::B8] {
            let per = bits.per_word();
            let n = per * 3 - 1;
            for i in 0..n {
                let mut v = vec![0; n];
                v[i] = 1;
                let t = pack(&v, bits, shape(n)).unwrap();
                for (w, &word) in t.words().iter().enumerate() {
                    let expected = if w == i / per { 1u32 << (bits.bits() * (i % per) as u32) } else { 0 };
                    assert_eq!(word as u32, expected, "bits={bits} i={i} word={w}");
                }
            }
        }
    }

    #[test]
    fn padding_checked_on_wrap() {
        let s = shape(3);
        assert!(PackedTensor::from_words(s.clone(), BitWidth::B4, vec![0x0000_0777]).is_ok());
        assert!(PackedTensor::from_words(s, BitWidth::B4, vec![0x0000_7777]).is_err());
    }

    fn naive_nibble_encode(v: &[i32]) -> Vec<u32> {
        let mut out = vec![0u32; v.len().div_ceil(8)];
        for (i, &x) in v.iter().enumerate() {
            let nib = if x < 0 { (x + 16) as u32 } else { x as u32 };
            out[i / 8] += nib * 16u32.pow((i % 8) as u32);
        }
        out
    }

    proptest! {
        #[test]
        fn roundtrip_all_widths(
            v4 in prop::collection::vec(-8i32..=7, 1..300),
            v8 in prop::collection::vec(-128i32..=127, 1..300),
            v32 in prop::collection::vec(any::<i32>(), 1..300),
        ) {
            for (v, bits) in [(&v4, BitWidth::B4), (&v8, BitWidth::B8), (&v32, BitWidth::B32)] {
                let t = pack(v, bits, shape(v.len())).unwrap();
                prop_assert_eq!(t.words().len(), bits.words_for(v.len()));
                prop_assert_eq!(&unpack(&t), v);
            }
        }

        #[test]
        fn nibble_layout_matches_naive_encoder(v in prop::collection::vec(-8i32..=7, 1..100)) {
            let t = pack(&v, BitWidth::B4, shape(v.len())).unwrap();
            let words: Vec<u32> = t.words().iter().map(|&w| w as u32).collect();
            prop_assert_eq!(words, naive_nibble_encode(&v));
        }
    }
}
