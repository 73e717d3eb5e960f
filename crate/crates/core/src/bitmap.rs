//! Bit-packed 3-D masks over OFM volumes.
//!
//! A set bit means the neuron (channel) has to be computed at that output
//! location; a clear bit means the computation can be skipped.

use crate::error::{Error, Result};
use crate::tensor::Shape3;

const WORD_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor3 {
    shape: Shape3,
    words: Vec<u64>,
}

impl BitTensor3 {
    pub fn new(shape: Shape3, fill: bool) -> Self {
        let len = shape.len();
        let mut words = vec![if fill { u64::MAX } else { 0 }; len.div_ceil(WORD_BITS)];
        if fill {
            clear_tail(&mut words, len);
        }
        BitTensor3 { shape, words }
    }

    pub fn ones(shape: Shape3) -> Self {
        Self::new(shape, true)
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::new(shape, false)
    }

    /// Builds a mask from a predicate over `(channel, row, col)`.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Self::zeros(shape);
        let mut idx = 0;
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    if f(c, y, x) {
                        bits.words[idx / WORD_BITS] |= 1 << (idx % WORD_BITS);
                    }
                    idx += 1;
                }
            }
        }
        bits
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get_linear(&self, idx: usize) -> bool {
        (self.words[idx / WORD_BITS] >> (idx % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> bool {
        self.get_linear(self.index(c, y, x))
    }

    pub fn set_linear(&mut self, idx: usize, value: bool) {
        let (w, b) = (idx / WORD_BITS, idx % WORD_BITS);
        if value {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: bool) {
        let idx = self.index(c, y, x);
        self.set_linear(idx, value);
    }

    /// Returns `count` (≤ 64) consecutive bits starting at linear index `start`,
    /// bit `i` of the result holding position `start + i`.
    #[inline]
    pub fn bits_at(&self, start: usize, count: usize) -> u64 {
        debug_assert!(count <= WORD_BITS && start + count <= self.len());
        if count == 0 {
            return 0;
        }
        let (w, b) = (start / WORD_BITS, start % WORD_BITS);
        let mut v = self.words[w] >> b;
        if b != 0 && b + count > WORD_BITS {
            v |= self.words[w + 1] << (WORD_BITS - b);
        }
        if count == WORD_BITS {
            v
        } else {
            v & ((1u64 << count) - 1)
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len() - self.count_ones()
    }

    /// Number of set bits in one channel slab.
    pub fn channel_count_ones(&self, c: usize) -> usize {
        let plane = self.shape.height * self.shape.width;
        let mut start = c * plane;
        let end = start + plane;
        let mut total = 0;
        while start < end {
            let n = (end - start).min(WORD_BITS);
            total += self.bits_at(start, n).count_ones() as usize;
            start += n;
        }
        total
    }

    /// Element-wise OR. Both masks must have the same shape.
    pub fn union_with(&mut self, other: &BitTensor3) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
        Ok(())
    }

    /// Element-wise AND. Both masks must have the same shape.
    pub fn intersect_with(&mut self, other: &BitTensor3) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= *b;
        }
        Ok(())
    }

    /// Element-wise inversion (the `~` of the fusion rule).
    pub fn invert(&self) -> BitTensor3 {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        clear_tail(&mut words, self.len());
        BitTensor3 {
            shape: self.shape,
            words,
        }
    }

    fn check_same_shape(&self, other: &BitTensor3) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "bitmap shapes differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Packs the bits row-major, least significant bit first within each byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len().div_ceil(8);
        let mut out = Vec::with_capacity(nbytes);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.truncate(nbytes);
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Padding bits past the end must be zero.
    pub fn from_bytes(shape: Shape3, bytes: &[u8]) -> Result<Self> {
        let len = shape.len();
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::invalid(format!(
                "bitmap slab for {shape} needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        let mut words = vec![0u64; len.div_ceil(WORD_BITS)];
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            words[i] = u64::from_le_bytes(buf);
        }
        let mut check = words.clone();
        clear_tail(&mut check, len);
        if check != words {
            return Err(Error::invalid("nonzero padding bits in bitmap slab"));
        }
        Ok(BitTensor3 { shape, words })
    }
}

fn clear_tail(words: &mut [u64], len: usize) {
    let rem = len % WORD_BITS;
    if rem != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape3 {
        Shape3::new(c, h, w)
    }

    #[test]
    fn ones_and_zeros_count() {
        let s = shape(3, 5, 7);
        assert_eq!(BitTensor3::ones(s).count_ones(), 105);
        assert_eq!(BitTensor3::zeros(s).count_ones(), 0);
        assert_eq!(BitTensor3::ones(s).invert().count_ones(), 0);
    }

    #[test]
    fn lsb_first_packing() {
        let mut b = BitTensor3::zeros(shape(1, 1, 10));
        b.set(0, 0, 0, true);
        b.set(0, 0, 9, true);
        assert_eq!(b.to_bytes(), vec![0b0000_0001, 0b0000_0010]);
    }

    #[test]
    fn rejects_dirty_padding() {
        let err = BitTensor3::from_bytes(shape(1, 1, 3), &[0b1111_0000]);
        assert!(err.is_err());
    }

    #[test]
    fn channel_counts() {
        let s = shape(4, 9, 9);
        let b = BitTensor3::from_fn(s, |c, y, _| c == 2 && y < 3);
        assert_eq!(b.channel_count_ones(0), 0);
        assert_eq!(b.channel_count_ones(2), 27);
        assert_eq!(b.count_ones(), 27);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(c in 1usize..4, h in 1usize..9, w in 1usize..19, seed in any::<u64>()) {
            let s = shape(c, h, w);
            let b = BitTensor3::from_fn(s, |c, y, x| (seed >> ((c * 7 + y * 3 + x) % 64)) & 1 == 1);
            let back = BitTensor3::from_bytes(s, &b.to_bytes()).unwrap();
            prop_assert_eq!(back, b);
        }

        #[test]
        fn bits_at_matches_get(len in 1usize..300, start_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let s = shape(1, 1, len);
            let b = BitTensor3::from_fn(s, |_, _, x| (seed.rotate_left(x as u32 % 64) ^ x as u64) & 1 == 1);
            let start = ((len - 1) as f64 * start_frac) as usize;
            let count = (len - start).min(64);
            let v = b.bits_at(start, count);
            for i in 0..count {
                prop_assert_eq!((v >> i) & 1 == 1, b.get_linear(start + i));
            }
        }
    }
}
