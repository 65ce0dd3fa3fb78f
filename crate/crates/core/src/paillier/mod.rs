//! Paillier additively homomorphic encryption with `g = n + 1`.
//!
//! Plaintexts live in `Z_n`, ciphertexts in `Z_{n²}`. Multiplying two
//! ciphertexts modulo `n²` adds the underlying plaintexts modulo `n`, which is
//! the only homomorphic operation the fusion protocol needs.
//!
//! Real numbers enter the plaintext space through [`FixedPointCodec`].

mod codec;
mod prime;

pub use codec::{FixedPointCodec, DEFAULT_SCALE_BITS};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Smallest modulus size accepted without the explicit insecure flag.
pub const MIN_SECURE_KEY_BITS: usize = 512;
/// Smallest modulus size accepted at all (tests use tiny keys for exhaustive checks).
pub const MIN_INSECURE_KEY_BITS: usize = 16;
pub const DEFAULT_KEY_BITS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("key size {bits} bits is below the minimum of {min} bits")]
    KeyTooSmall { bits: usize, min: usize },
    #[error("plaintext is outside [0, n)")]
    PlaintextOutOfRange,
    #[error("ciphertext is outside [0, n²) or not invertible")]
    InvalidCiphertext,
    #[error("value {value} exceeds the codec range ±{bound:e}")]
    CodecOverflow { value: f64, bound: f64 },
    #[error("non-finite value cannot be encoded")]
    NonFinite,
    #[error("primes must be distinct and satisfy gcd(pq, (p-1)(q-1)) = 1")]
    BadPrimes,
    #[error("prime generation did not finish within {attempts} candidates")]
    PrimeSearchExhausted { attempts: usize },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed key or ciphertext encoding: {0}")]
    Encoding(String),
}

pub type Result<T> = std::result::Result<T, PaillierError>;

/// Encryption key `f_e`. Holds no trapdoor information.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    n_squared: BigUint,
}

/// Decryption key `f_d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateKey {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

/// Component-wise encryption of a real vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedVector {
    pub components: Vec<Ciphertext>,
}

impl PublicKey {
    fn from_modulus(n: BigUint) -> Self {
        let g = &n + 1u32;
        let n_squared = &n * &n;
        Self { n, g, n_squared }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// `c = g^m · r^n mod n²` for a fresh unit `r` drawn from `rng`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let r = self.random_unit(rng);
        Ok(self.encrypt_with_nonce(m, &r))
    }

    /// Deterministic encryption with a caller-chosen nonce; `r` must be a unit mod `n`.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Ciphertext {
        // g^m = (1 + n)^m = 1 + m·n  (mod n²)
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ciphertext((gm * rn) % &self.n_squared)
    }

    /// The ciphertext operator `⊕`: decrypts to `(m_a + m_b) mod n`.
    ///
    /// Ciphertexts carry no key identifier, so mixing keys is not detected.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext((&a.0 * &b.0) % &self.n_squared)
    }

    /// Folds `⊕` over a non-empty iterator of ciphertexts.
    pub fn sum<'a>(&self, items: impl IntoIterator<Item = &'a Ciphertext>) -> Option<Ciphertext> {
        let mut it = items.into_iter();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, c| self.add(&acc, c)))
    }

    pub fn add_vectors(&self, a: &EncryptedVector, b: &EncryptedVector) -> Result<EncryptedVector> {
        if a.components.len() != b.components.len() {
            return Err(PaillierError::LengthMismatch { expected: a.components.len(), got: b.components.len() });
        }
        let components = a.components.iter().zip(&b.components).map(|(x, y)| self.add(x, y)).collect();
        Ok(EncryptedVector { components })
    }

    pub fn encrypt_vector<R: RngCore + ?Sized>(
        &self,
        codec: &FixedPointCodec,
        values: &[f64],
        rng: &mut R,
    ) -> Result<EncryptedVector> {
        let components = values
            .iter()
            .map(|&x| {
                let m = codec.encode(x)?;
                self.encrypt(&m, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncryptedVector { components })
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = random_below(&self.n, rng);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    pub fn validate_ciphertext(&self, c: &Ciphertext) -> Result<()> {
        if c.0 >= self.n_squared || c.0.is_zero() {
            return Err(PaillierError::InvalidCiphertext);
        }
        Ok(())
    }
}

impl PrivateKey {
    /// Builds a keypair from two primes. `p = 5, q = 7` is a valid (tiny) key.
    pub fn from_primes(p: &BigUint, q: &BigUint) -> Result<Self> {
        if p == q || p < &BigUint::from(2u32) || q < &BigUint::from(2u32) {
            return Err(PaillierError::BadPrimes);
        }
        let n = p * q;
        let p1 = p - 1u32;
        let q1 = q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(PaillierError::BadPrimes);
        }
        let lambda = p1.lcm(&q1);
        let public = PublicKey::from_modulus(n);
        // With g = n+1, L(g^λ mod n²) = λ mod n.
        let mu = (&lambda % &public.n).modinv(&public.n).ok_or(PaillierError::BadPrimes)?;
        Ok(Self { public, lambda, mu })
    }

    pub fn from_parts(n: BigUint, lambda: BigUint, mu: BigUint) -> Result<Self> {
        let public = PublicKey::from_modulus(n);
        let key = Self { public, lambda, mu };
        // Spot-check consistency on a fixed plaintext.
        let probe = BigUint::from(1u32) % key.public.n();
        let c = key.public.encrypt_with_nonce(&probe, &BigUint::one());
        if key.decrypt(&c)? != probe {
            return Err(PaillierError::Encoding("lambda/mu do not match the modulus".into()));
        }
        Ok(key)
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        let pk = &self.public;
        pk.validate_ciphertext(c)?;
        let u = c.0.modpow(&self.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok((l * &self.mu) % &pk.n)
    }

    /// Decrypts each component, decodes it, and divides by `divisor`.
    pub fn decrypt_vector(&self, codec: &FixedPointCodec, ev: &EncryptedVector, divisor: usize) -> Result<Vec<f64>> {
        ev.components
            .iter()
            .map(|c| {
                let m = self.decrypt(c)?;
                codec.decode(&m, divisor)
            })
            .collect()
    }
}

/// Generates a keypair whose modulus has exactly `key_bits` bits.
///
/// `insecure` must be set for sizes below [`MIN_SECURE_KEY_BITS`].
pub fn keygen<R: RngCore + ?Sized>(key_bits: usize, insecure: bool, rng: &mut R) -> Result<(PublicKey, PrivateKey)> {
    let min = if insecure { MIN_INSECURE_KEY_BITS } else { MIN_SECURE_KEY_BITS };
    if key_bits < min {
        return Err(PaillierError::KeyTooSmall { bits: key_bits, min });
    }
    let p_bits = key_bits / 2;
    let q_bits = key_bits - p_bits;
    loop {
        let p = prime::random_prime(p_bits, rng)?;
        let q = prime::random_prime(q_bits, rng)?;
        match PrivateKey::from_primes(&p, &q) {
            Ok(sk) if sk.public.bits() as usize == key_bits => return Ok((sk.public.clone(), sk)),
            _ => continue,
        }
    }
}

/// Uniform integer in `[0, bound)`.
fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bits = bound.bits() as usize;
    let bytes = bits.div_ceil(8);
    let excess = bytes * 8 - bits;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        if excess > 0 {
            buf[0] &= 0xff >> excess;
        }
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return v;
        }
    }
}

pub(crate) fn biguint_to_b64(v: &BigUint) -> String {
    B64.encode(v.to_bytes_be())
}

pub(crate) fn biguint_from_b64(s: &str) -> Result<BigUint> {
    let bytes = B64.decode(s).map_err(|e| PaillierError::Encoding(e.to_string()))?;
    Ok(BigUint::from_bytes_be(&bytes))
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn from_value(v: BigUint) -> Self {
        Self(v)
    }

    pub fn to_bytes_be(&self) -> Vec<u8> {
        self.0.to_bytes_be()
    }

    pub fn from_bytes_be(bytes: &[u8]) -> Self {
        Self(BigUint::from_bytes_be(bytes))
    }
}

impl Serialize for Ciphertext {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&biguint_to_b64(&self.0))
    }
}

impl<'de> Deserialize<'de> for Ciphertext {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        biguint_from_b64(&s).map(Ciphertext).map_err(serde::de::Error::custom)
    }
}

impl Serialize for EncryptedVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.components.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EncryptedVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Self { components: Vec::deserialize(d)? })
    }
}

/// On-disk form of a public key: base64 big-endian integers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublicKeyFile {
    pub n: String,
    pub g: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivateKeyFile {
    pub n: String,
    pub lambda: String,
    pub mu: String,
}

impl From<&PublicKey> for PublicKeyFile {
    fn from(pk: &PublicKey) -> Self {
        Self { n: biguint_to_b64(&pk.n), g: biguint_to_b64(&pk.g) }
    }
}

impl TryFrom<&PublicKeyFile> for PublicKey {
    type Error = PaillierError;

    fn try_from(f: &PublicKeyFile) -> Result<Self> {
        let n = biguint_from_b64(&f.n)?;
        let g = biguint_from_b64(&f.g)?;
        if g != &n + 1u32 {
            return Err(PaillierError::Encoding("only g = n + 1 is supported".into()));
        }
        Ok(PublicKey::from_modulus(n))
    }
}

impl From<&PrivateKey> for PrivateKeyFile {
    fn from(sk: &PrivateKey) -> Self {
        Self { n: biguint_to_b64(&sk.public.n), lambda: biguint_to_b64(&sk.lambda), mu: biguint_to_b64(&sk.mu) }
    }
}

impl TryFrom<&PrivateKeyFile> for PrivateKey {
    type Error = PaillierError;

    fn try_from(f: &PrivateKeyFile) -> Result<Self> {
        PrivateKey::from_parts(biguint_from_b64(&f.n)?, biguint_from_b64(&f.lambda)?, biguint_from_b64(&f.mu)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_key() -> PrivateKey {
        PrivateKey::from_primes(&BigUint::from(5u32), &BigUint::from(7u32)).unwrap()
    }

    #[test]
    fn forced_small_primes() {
        let sk = tiny_key();
        assert_eq!(sk.public_key().n(), &BigUint::from(35u32));
        assert_eq!(sk.public_key().n_squared(), &BigUint::from(1225u32));
        assert_eq!(sk.public_key().g(), &BigUint::from(36u32));
        assert_eq!(sk.lambda(), &BigUint::from(12u32));
    }

    #[test]
    fn seeded_16_bit_key_is_deterministic() {
        let (pk1, _) = keygen(16, true, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let (pk2, sk2) = keygen(16, true, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(pk1, pk2);
        assert_eq!(pk1.bits(), 16);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = pk2.encrypt(&BigUint::from(7u32), &mut rng).unwrap();
        assert_eq!(sk2.decrypt(&c).unwrap(), BigUint::from(7u32));
    }

    #[test]
    fn small_keys_need_insecure_flag() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(keygen(64, false, &mut rng), Err(PaillierError::KeyTooSmall { .. })));
        assert!(matches!(keygen(8, true, &mut rng), Err(PaillierError::KeyTooSmall { .. })));
    }

    #[test]
    fn probabilistic_encryption() {
        let (pk, sk) = keygen(128, true, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let five = BigUint::from(5u32);
        let a = pk.encrypt(&five, &mut rng).unwrap();
        let b = pk.encrypt(&five, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(sk.decrypt(&a).unwrap(), five);
        assert_eq!(sk.decrypt(&b).unwrap(), five);
        let zero = pk.encrypt(&BigUint::zero(), &mut rng).unwrap();
        assert!(sk.decrypt(&zero).unwrap().is_zero());
    }

    #[test]
    fn add_examples() {
        let (pk, sk) = keygen(128, true, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let e3 = pk.encrypt(&BigUint::from(3u32), &mut rng).unwrap();
        let e4 = pk.encrypt(&BigUint::from(4u32), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&e3, &e4)).unwrap(), BigUint::from(7u32));
        let e0 = pk.encrypt(&BigUint::zero(), &mut rng).unwrap();
        assert_eq!(sk.decrypt(&pk.add(&e3, &e0)).unwrap(), BigUint::from(3u32));
    }

    #[test]
    fn out_of_range_plaintext() {
        let sk = tiny_key();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(
            sk.public_key().encrypt(&BigUint::from(35u32), &mut rng),
            Err(PaillierError::PlaintextOutOfRange)
        );
    }

    #[test]
    fn key_files_round_trip() {
        let (pk, sk) = keygen(256, true, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let pf = PublicKeyFile::from(&pk);
        let sf = PrivateKeyFile::from(&sk);
        let pk2 = PublicKey::try_from(&pf).unwrap();
        let sk2 = PrivateKey::try_from(&sf).unwrap();
        assert_eq!(pk, pk2);
        assert_eq!(sk, sk2);
    }

    #[test]
    fn ciphertext_serializes_as_base64() {
        let c = Ciphertext::from_value(BigUint::from(0x0102u32));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, "\"AQI=\"");
        let back: Ciphertext = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
