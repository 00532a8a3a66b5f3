//! Dense 4-D real tensors and bit-packed sign tensors.
//!
//! `Tensor4` is a plain row-major `(n, c, h, w)` buffer — no broadcasting, no
//! general N-D algebra, just what the conv/training stack needs. `BitTensor`
//! stores the same logical shape at one bit per element (bit 1 ⇔ +1,
//! bit 0 ⇔ −1), with padding bits of the final word held at zero so that
//! whole-word popcount loops need no per-element branching.

use crate::num::Scalar;

pub const WORD_BITS: usize = 64;

/// Shape of a 4-D tensor in `(batch, channel, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat index.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

/// Dense real-valued 4-D tensor, row-major `(n, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor4 { shape, data }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.shape.idx(n, c, h, w);
        &mut self.data[i]
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: Scalar> std::ops::AddAssign<&Tensor4<T>> for Tensor4<T> {
    fn add_assign(&mut self, rhs: &Tensor4<T>) {
        assert_eq!(self.shape, rhs.shape, "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

/// Bit-packed `{−1, +1}` tensor: bit 1 ⇔ +1, bit 0 ⇔ −1.
///
/// Bits follow the same row-major `(n, c, h, w)` order as `Tensor4`, LSB
/// first within each word. Padding bits in the final word are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape4,
    words: Vec<u64>,
}

impl BitTensor {
    /// All −1 (all bits zero).
    pub fn zeros(shape: Shape4) -> Self {
        let nwords = shape.len().div_ceil(WORD_BITS);
        BitTensor {
            shape,
            words: vec![0u64; nwords],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    /// Logical element count.
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, plus: bool) {
        debug_assert!(i < self.len());
        let word = i / WORD_BITS;
        let bit = 1u64 << (i % WORD_BITS);
        if plus {
            self.words[word] |= bit;
        } else {
            self.words[word] &= !bit;
        }
    }

    /// Reads up to 64 bits starting at `bit_off`. `len` must be ≤ 64 and the
    /// range must lie inside the tensor.
    #[inline]
    pub fn read_bits(&self, bit_off: usize, len: usize) -> u64 {
        read_bits(&self.words, bit_off, len)
    }

    /// True when all padding bits in the final word are zero.
    pub fn padding_is_zero(&self) -> bool {
        let used = self.len() % WORD_BITS;
        if used == 0 {
            return true;
        }
        match self.words.last() {
            Some(&last) => last >> used == 0,
            None => true,
        }
    }
}

/// Reads `len ≤ 64` bits from a packed word buffer starting at `bit_off`.
#[inline]
pub fn read_bits(words: &[u64], bit_off: usize, len: usize) -> u64 {
    debug_assert!(len <= WORD_BITS);
    if len == 0 {
        return 0;
    }
    let word = bit_off / WORD_BITS;
    let shift = bit_off % WORD_BITS;
    let mut out = words[word] >> shift;
    if shift != 0 && shift + len > WORD_BITS {
        out |= words[word + 1] << (WORD_BITS - shift);
    }
    if len == WORD_BITS {
        out
    } else {
        out & ((1u64 << len) - 1)
    }
}

/// Binarizes by sign: +1 where `x ≥ 0`, −1 otherwise.
pub fn sign_binarize<T: Scalar>(x: &Tensor4<T>) -> BitTensor {
    let shape = x.shape();
    let data = x.data();
    let nwords = shape.len().div_ceil(WORD_BITS);
    let mut words = vec![0u64; nwords];
    for (wi, chunk) in data.chunks(WORD_BITS).enumerate() {
        let mut word = 0u64;
        for (bi, &v) in chunk.iter().enumerate() {
            if v >= T::zero() {
                word |= 1u64 << bi;
            }
        }
        words[wi] = word;
    }
    BitTensor { shape, words }
}

/// Expands each bit to a real `+1.0` or `−1.0`.
pub fn unpack<T: Scalar>(b: &BitTensor) -> Tensor4<T> {
    let one = T::one();
    let neg = -T::one();
    let data = (0..b.len()).map(|i| if b.get(i) { one } else { neg }).collect();
    Tensor4::from_vec(b.shape(), data)
}

/// Elementwise sign as ±1 reals: `unpack(sign_binarize(x))` in one pass.
pub fn sign_pm1<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let one = T::one();
    let neg = -T::one();
    x.map(|v| if v >= T::zero() { one } else { neg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w)
    }

    #[test]
    fn sign_binarize_zero_maps_to_plus_one() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 3), vec![-0.5f32, 0.0, 3.2]);
        let b = sign_binarize(&x);
        let u: Tensor4<f32> = unpack(&b);
        assert_eq!(u.data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn all_zeros_maps_to_all_plus_one() {
        let x: Tensor4<f32> = Tensor4::zeros(shape(2, 3, 2, 2));
        let b = sign_binarize(&x);
        assert!((0..b.len()).all(|i| b.get(i)));
    }

    #[test]
    fn unpack_bit_order_is_lsb_first() {
        // bits 0b101 over 3 elements → [+1, −1, +1]
        let mut b = BitTensor::zeros(shape(1, 1, 1, 3));
        b.set(0, true);
        b.set(2, true);
        let u: Tensor4<f64> = unpack(&b);
        assert_eq!(u.data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn read_bits_straddles_word_boundary() {
        let words = vec![0x8000_0000_0000_0000u64, 0b1011u64];
        // 6 bits starting at bit 62: bit62=0, bit63=1, then 1,1,0,1
        assert_eq!(read_bits(&words, 62, 6), 0b101110);
        assert_eq!(read_bits(&words, 64, 4), 0b1011);
        assert_eq!(read_bits(&words, 0, 64), 0x8000_0000_0000_0000u64);
    }

    proptest! {
        #[test]
        fn roundtrip_sign_unpack_is_identity(
            n in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..9,
            seed in any::<u64>()
        ) {
            let s = shape(n, c, h, w);
            let mut b = BitTensor::zeros(s);
            let mut state = seed;
            for i in 0..s.len() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                b.set(i, state >> 63 == 1);
            }
            prop_assert!(b.padding_is_zero());
            let u: Tensor4<f32> = unpack(&b);
            prop_assert!(u.data().iter().all(|&v| v == 1.0 || v == -1.0));
            let again = sign_binarize(&u);
            prop_assert_eq!(&again, &b);
            prop_assert_eq!(again.shape(), s);
        }

        #[test]
        fn sign_binarize_preserves_shape_and_pads_zero(
            n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..7
        ) {
            let s = shape(n, c, h, w);
            let x: Tensor4<f32> = Tensor4::full(s, -2.5);
            let b = sign_binarize(&x);
            prop_assert_eq!(b.shape(), s);
            prop_assert_eq!(b.len(), s.len());
            prop_assert!(b.padding_is_zero());
        }
    }
}
