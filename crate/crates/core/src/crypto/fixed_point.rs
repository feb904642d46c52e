//! Signed fixed-point encoding of reals into residue rings.
//!
//! A real `x` maps to `round(x · 2^scale_bits)`; negative values wrap into the
//! upper half of the ring (`[0, n)` for Paillier plaintexts, `2^64` or `2^128`
//! for additive masking).

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{Signed, ToPrimitive, Zero};

use super::CryptoError;

pub const DEFAULT_SCALE_BITS: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignedFixedPoint {
    scale_bits: u32,
}

impl Default for SignedFixedPoint {
    fn default() -> Self {
        Self { scale_bits: DEFAULT_SCALE_BITS }
    }
}

impl SignedFixedPoint {
    pub fn new(scale_bits: u32) -> Self {
        Self { scale_bits }
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    /// `round(x · 2^s)` as an exact signed integer.
    pub fn to_integer(&self, x: f64) -> Result<i128, CryptoError> {
        if !x.is_finite() {
            return Err(CryptoError::Encoding(format!("cannot encode non-finite value {x}")));
        }
        let scaled = (x * self.scale()).round();
        if scaled.abs() >= 2f64.powi(126) {
            return Err(CryptoError::Encoding(format!("{x} overflows {} fractional bits", self.scale_bits)));
        }
        Ok(scaled as i128)
    }

    pub fn from_integer(&self, v: i128) -> f64 {
        v as f64 / self.scale()
    }

    /// Encodes into `[0, modulus)`; the magnitude must stay below `modulus / 2`.
    pub fn encode(&self, x: f64, modulus: &BigUint) -> Result<BigUint, CryptoError> {
        let v = self.to_integer(x)?;
        encode_signed(v, modulus)
    }

    pub fn decode(&self, v: &BigUint, modulus: &BigUint) -> f64 {
        decode_at_scale(v, modulus, self.scale_bits)
    }

    /// Wrapping encoding into `Z_{2^64}`.
    pub fn encode_u64(&self, x: f64) -> Result<u64, CryptoError> {
        let v = self.to_integer(x)?;
        if v.unsigned_abs() >= 1u128 << 63 {
            return Err(CryptoError::Encoding(format!("{x} does not fit a 64-bit ring at {} bits", self.scale_bits)));
        }
        Ok(v as i64 as u64)
    }

    pub fn decode_u64(&self, v: u64) -> f64 {
        (v as i64) as f64 / self.scale()
    }

    /// Wrapping encoding into `Z_{2^128}`.
    pub fn encode_u128(&self, x: f64) -> Result<u128, CryptoError> {
        Ok(self.to_integer(x)? as u128)
    }

    pub fn decode_u128(&self, v: u128) -> f64 {
        (v as i128) as f64 / self.scale()
    }
}

/// Maps a signed integer into `[0, modulus)` with upper-half wraparound.
pub fn encode_signed(v: i128, modulus: &BigUint) -> Result<BigUint, CryptoError> {
    let mag = BigUint::from(v.unsigned_abs());
    if mag > (modulus >> 1) {
        return Err(CryptoError::Encoding(format!(
            "|{v}| exceeds half of the {}-bit plaintext space",
            modulus.bits()
        )));
    }
    if v >= 0 || mag.is_zero() {
        Ok(mag)
    } else {
        Ok(modulus - mag)
    }
}

/// Inverse of [`encode_signed`] as an arbitrary-precision integer.
pub fn decode_signed(v: &BigUint, modulus: &BigUint) -> BigInt {
    if v > &(modulus >> 1) {
        BigInt::from_biguint(Sign::Minus, modulus - v)
    } else {
        BigInt::from(v.clone())
    }
}

/// Decodes a residue whose fixed-point scale is `scale_bits` (products of
/// encodings carry the sum of their scales).
pub fn decode_at_scale(v: &BigUint, modulus: &BigUint, scale_bits: u32) -> f64 {
    let signed = decode_signed(v, modulus);
    let mag = signed.abs().to_biguint().unwrap_or_default();
    // shift off excess bits first so the f64 conversion keeps full precision
    let extra = mag.bits().saturating_sub(120) as u32;
    let shifted = (&mag >> extra).to_f64().unwrap_or(f64::INFINITY);
    let value = shifted * 2f64.powi(extra as i32 - scale_bits as i32);
    if signed.is_negative() {
        -value
    } else {
        value
    }
}
