//! Arithmetic in the ring of integers modulo 2^64 and the fixed-point codec
//! layered on top of it.
//!
//! Every secret-shared value in the crate lives in [`RingElement`]. Reals are
//! carried at a fixed binary scale of `f` fraction bits; a product of two
//! scale-`f` values sits at scale `2f` and is brought back with
//! [`trunc_local`].

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::PartyId;

/// Byte width of a serialized ring element.
pub const RING_BYTES: usize = 8;

/// Bit length of the share modulus.
pub const RING_BITS: u32 = 64;

/// Residue modulo 2^64. All arithmetic wraps.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(transparent)]
pub struct RingElement(pub u64);

impl RingElement {
    pub const ZERO: RingElement = RingElement(0);
    pub const ONE: RingElement = RingElement(1);

    #[inline]
    pub fn new(value: u64) -> Self {
        RingElement(value)
    }

    #[inline]
    pub fn from_i64(value: i64) -> Self {
        RingElement(value as u64)
    }

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    /// Two's-complement reading of the residue, in `[-2^63, 2^63)`.
    #[inline]
    pub fn signed(self) -> i64 {
        self.0 as i64
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        RingElement(rng.gen())
    }

    #[inline]
    pub fn to_le_bytes(self) -> [u8; RING_BYTES] {
        self.0.to_le_bytes()
    }

    #[inline]
    pub fn from_le_bytes(bytes: [u8; RING_BYTES]) -> Self {
        RingElement(u64::from_le_bytes(bytes))
    }
}

impl fmt::Debug for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({})", self.0)
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl From<u64> for RingElement {
    fn from(value: u64) -> Self {
        RingElement(value)
    }
}

impl Add for RingElement {
    type Output = RingElement;
    #[inline]
    fn add(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingElement {
    type Output = RingElement;
    #[inline]
    fn sub(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_sub(rhs.0))
    }
}

impl Mul for RingElement {
    type Output = RingElement;
    #[inline]
    fn mul(self, rhs: RingElement) -> RingElement {
        RingElement(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingElement {
    type Output = RingElement;
    #[inline]
    fn neg(self) -> RingElement {
        RingElement(self.0.wrapping_neg())
    }
}

impl AddAssign for RingElement {
    #[inline]
    fn add_assign(&mut self, rhs: RingElement) {
        *self = *self + rhs;
    }
}

impl SubAssign for RingElement {
    #[inline]
    fn sub_assign(&mut self, rhs: RingElement) {
        *self = *self - rhs;
    }
}

impl MulAssign for RingElement {
    #[inline]
    fn mul_assign(&mut self, rhs: RingElement) {
        *self = *self * rhs;
    }
}

impl Sum for RingElement {
    fn sum<I: Iterator<Item = RingElement>>(iter: I) -> RingElement {
        iter.fold(RingElement::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a RingElement> for RingElement {
    fn sum<I: Iterator<Item = &'a RingElement>>(iter: I) -> RingElement {
        iter.copied().sum()
    }
}

/// Serializes ring elements as consecutive 8-byte little-endian words.
pub fn elements_to_bytes(elements: &[RingElement]) -> Vec<u8> {
    let mut out = Vec::with_capacity(elements.len() * RING_BYTES);
    for e in elements {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

pub fn elements_from_bytes(bytes: &[u8]) -> Result<Vec<RingElement>> {
    if !bytes.len().is_multiple_of(RING_BYTES) {
        return Err(Error::protocol(format!(
            "ring payload of {} bytes is not a multiple of {RING_BYTES}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(RING_BYTES)
        .map(|c| RingElement::from_le_bytes(c.try_into().expect("chunk width")))
        .collect())
}

/// Fixed-point encoding of reals into the ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    frac_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { frac_bits: Self::DEFAULT_FRAC_BITS }
    }
}

impl FixedPointCodec {
    pub const DEFAULT_FRAC_BITS: u32 = 20;

    pub fn new(frac_bits: u32) -> Result<Self> {
        if frac_bits == 0 || frac_bits >= 31 {
            return Err(Error::Config(format!(
                "fraction bits must lie in [1, 30], got {frac_bits}"
            )));
        }
        Ok(FixedPointCodec { frac_bits })
    }

    #[inline]
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Magnitude bound `2^(63 - f)` on encodable reals.
    pub fn int_bound(&self) -> f64 {
        2f64.powi(63 - self.frac_bits as i32)
    }

    /// One unit in the last place, `2^-f`.
    pub fn ulp(&self) -> f64 {
        2f64.powi(-(self.frac_bits as i32))
    }

    fn scale(&self) -> f64 {
        2f64.powi(self.frac_bits as i32)
    }

    pub fn encode(&self, x: f64) -> Result<RingElement> {
        if !x.is_finite() || x.abs() >= self.int_bound() {
            return Err(Error::Range(format!(
                "{x} is not encodable with {} fraction bits",
                self.frac_bits
            )));
        }
        let scaled = (x * self.scale()).round();
        // |scaled| can still reach 2^63 after rounding at the very edge.
        if scaled.abs() >= 2f64.powi(63) {
            return Err(Error::Range(format!("{x} rounds outside the ring")));
        }
        Ok(RingElement::from_i64(scaled as i64))
    }

    pub fn encode_slice(&self, xs: &[f64]) -> Result<Vec<RingElement>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode(&self, e: RingElement) -> f64 {
        e.signed() as f64 / self.scale()
    }

    /// Decodes a value carried at `scale_bits` fraction bits.
    pub fn decode_at(&self, e: RingElement, scale_bits: u32) -> f64 {
        e.signed() as f64 / 2f64.powi(scale_bits as i32)
    }

    pub fn decode_slice(&self, es: &[RingElement]) -> Vec<f64> {
        es.iter().map(|&e| self.decode(e)).collect()
    }
}

/// Local probabilistic truncation of one party's share by `f` bits.
///
/// Party 0 shifts its share arithmetically; party 1 shifts the negation and
/// negates back. The reconstructed pair equals `floor(x / 2^f)` up to one unit,
/// except with probability about `2^(l+1-64)` when `|x| < 2^l`.
pub fn trunc_local(share: RingElement, frac_bits: u32, party: PartyId) -> RingElement {
    match party {
        PartyId::P0 => RingElement::from_i64(share.signed() >> frac_bits),
        PartyId::P1 => -RingElement::from_i64((-share).signed() >> frac_bits),
    }
}
