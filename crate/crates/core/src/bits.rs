//! Fixed-width opaque bit vectors.
//!
//! Event metadata, flow contexts and packet headers all travel through the
//! datapath as `BitVector`s. Bits are numbered from the most significant bit
//! of the first byte; a width that is not a multiple of eight leaves the tail
//! of the last byte as zero padding.

use std::fmt;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    width: usize,
    bytes: Vec<u8>,
}

impl BitVector {
    pub fn zeros(width: usize) -> Self {
        Self {
            width,
            bytes: vec![0; width.div_ceil(8)],
        }
    }

    /// Builds a vector from raw bytes, truncating or zero-extending to `width`.
    pub fn from_bytes(width: usize, src: &[u8]) -> Self {
        let mut v = Self::zeros(width);
        let n = v.bytes.len().min(src.len());
        v.bytes[..n].copy_from_slice(&src[..n]);
        v.mask_tail();
        v
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.width, "bit {i} out of range for width {}", self.width);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn set_bit(&mut self, i: usize, on: bool) {
        assert!(i < self.width, "bit {i} out of range for width {}", self.width);
        let mask = 0x80 >> (i % 8);
        if on {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    /// Reads `len` (at most 64) bits starting at `offset` as a big-endian integer.
    pub fn get(&self, offset: usize, len: usize) -> u64 {
        assert!(len <= 64, "field wider than 64 bits");
        assert!(
            offset + len <= self.width,
            "field {offset}+{len} exceeds width {}",
            self.width
        );
        let mut out = 0u64;
        let mut i = offset;
        let end = offset + len;
        while i < end {
            // Whole-byte fast path.
            if i.is_multiple_of(8) && end - i >= 8 {
                out = (out << 8) | u64::from(self.bytes[i / 8]);
                i += 8;
            } else {
                out = (out << 1) | u64::from(self.bit(i));
                i += 1;
            }
        }
        out
    }

    /// Writes the low `len` bits of `value` at `offset`.
    pub fn set(&mut self, offset: usize, len: usize, value: u64) {
        assert!(len <= 64, "field wider than 64 bits");
        assert!(
            offset + len <= self.width,
            "field {offset}+{len} exceeds width {}",
            self.width
        );
        let mut i = offset;
        let end = offset + len;
        while i < end {
            let remaining = end - i;
            if i.is_multiple_of(8) && remaining >= 8 {
                self.bytes[i / 8] = (value >> (remaining - 8)) as u8;
                i += 8;
            } else {
                self.set_bit(i, (value >> (remaining - 1)) & 1 == 1);
                i += 1;
            }
        }
    }

    pub fn to_hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn mask_tail(&mut self) {
        let spare = self.bytes.len() * 8 - self.width;
        if spare > 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= 0xffu8 << spare;
            }
        }
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector<{}>({})", self.width, self.to_hex())
    }
}

/// Sequential field packer used by protocol programs to lay out structs.
pub struct FieldWriter<'a> {
    bits: &'a mut BitVector,
    pos: usize,
}

impl<'a> FieldWriter<'a> {
    pub fn new(bits: &'a mut BitVector) -> Self {
        Self { bits, pos: 0 }
    }

    pub fn at(bits: &'a mut BitVector, pos: usize) -> Self {
        Self { bits, pos }
    }

    pub fn put(&mut self, len: usize, value: u64) -> &mut Self {
        debug_assert!(
            len == 64 || value < (1u64 << len),
            "value {value} does not fit in {len} bits"
        );
        self.bits.set(self.pos, len, value);
        self.pos += len;
        self
    }

    pub fn put_bool(&mut self, on: bool) -> &mut Self {
        self.put(1, u64::from(on))
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Sequential field reader, the mirror of [`FieldWriter`].
pub struct FieldReader<'a> {
    bits: &'a BitVector,
    pos: usize,
}

impl<'a> FieldReader<'a> {
    pub fn new(bits: &'a BitVector) -> Self {
        Self { bits, pos: 0 }
    }

    pub fn at(bits: &'a BitVector, pos: usize) -> Self {
        Self { bits, pos }
    }

    pub fn take(&mut self, len: usize) -> u64 {
        let v = self.bits.get(self.pos, len);
        self.pos += len;
        v
    }

    pub fn take_bool(&mut self) -> bool {
        self.take(1) == 1
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn msb_first_layout() {
        let mut v = BitVector::zeros(12);
        v.set_bit(0, true);
        v.set_bit(11, true);
        assert_eq!(v.as_bytes(), &[0x80, 0x10]);
        assert_eq!(v.get(0, 12), 0x801);
    }

    #[test]
    fn tail_padding_is_masked() {
        let v = BitVector::from_bytes(10, &[0xff, 0xff]);
        assert_eq!(v.as_bytes(), &[0xff, 0xc0]);
    }

    #[test]
    #[should_panic(expected = "exceeds width")]
    fn out_of_range_field_panics() {
        BitVector::zeros(8).get(4, 8);
    }

    proptest! {
        #[test]
        fn set_then_get(width in 1usize..300, off_frac in 0.0f64..1.0, len in 1usize..=64, value: u64) {
            prop_assume!(len <= width);
            let offset = ((width - len) as f64 * off_frac) as usize;
            let value = if len == 64 { value } else { value & ((1u64 << len) - 1) };
            let mut v = BitVector::zeros(width);
            v.set(offset, len, value);
            prop_assert_eq!(v.get(offset, len), value);
            // Nothing outside the field was touched.
            for i in (0..offset).chain(offset + len..width) {
                prop_assert!(!v.bit(i));
            }
        }
    }
}
