use num_bigint::BigUint;
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use super::{PaillierError, PublicKey, Result};

pub const DEFAULT_SCALE_BITS: u32 = 40;

/// Signed fixed-point encoding of reals into `Z_n`.
///
/// `x ↦ round(x·2^s)`, with negative values stored as `n − round(|x|·2^s)`.
/// Decoding treats residues above `n/2` as negative. Sums of encodings decode
/// correctly as long as the true sum stays below [`FixedPointCodec::max_magnitude`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointCodec {
    scale_bits: u32,
    n: BigUint,
    half_n: BigUint,
    max_magnitude: f64,
}

impl FixedPointCodec {
    pub fn new(pk: &PublicKey, scale_bits: u32) -> Self {
        Self::with_modulus(pk.n().clone(), scale_bits)
    }

    pub fn with_modulus(n: BigUint, scale_bits: u32) -> Self {
        let half_n = &n >> 1u32;
        // |x| < n / (2·scale)
        let max_magnitude = big_to_f64(&half_n) / 2f64.powi(scale_bits as i32);
        Self { scale_bits, n, half_n, max_magnitude }
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.scale_bits as i32)
    }

    /// Worst-case rounding error of a single encode/decode round trip.
    pub fn resolution(&self) -> f64 {
        0.5 / self.scale()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.max_magnitude
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn encode(&self, x: f64) -> Result<BigUint> {
        if !x.is_finite() {
            return Err(PaillierError::NonFinite);
        }
        if x.abs() >= self.max_magnitude {
            return Err(PaillierError::CodecOverflow { value: x, bound: self.max_magnitude });
        }
        let scaled = (x.abs() * self.scale()).round();
        let m = BigUint::from_f64(scaled).ok_or(PaillierError::NonFinite)?;
        if x < 0.0 && !m.is_zero() {
            Ok(&self.n - m)
        } else {
            Ok(m)
        }
    }

    /// Decodes a residue and divides by `divisor` (the party count when
    /// decoding an aggregate).
    pub fn decode(&self, m: &BigUint, divisor: usize) -> Result<f64> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let magnitude = if m > &self.half_n { -big_to_f64(&(&self.n - m)) } else { big_to_f64(m) };
        Ok(magnitude / self.scale() / divisor.max(1) as f64)
    }
}

fn big_to_f64(v: &BigUint) -> f64 {
    v.to_f64().unwrap_or(f64::INFINITY)
}
