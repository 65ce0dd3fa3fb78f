use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::RngCore;

use super::{random_below, PaillierError, Result};

const SMALL_PRIMES: [u32; 24] = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97];
const MILLER_RABIN_ROUNDS: usize = 40;
const MAX_CANDIDATES: usize = 1_000_000;

/// Random prime of exactly `bits` bits with the top two bits set, so that the
/// product of two such primes has exactly twice as many bits.
pub(super) fn random_prime<R: RngCore + ?Sized>(bits: usize, rng: &mut R) -> Result<BigUint> {
    assert!(bits >= 4, "prime size too small");
    let bytes = bits.div_ceil(8);
    let excess = bytes * 8 - bits;
    let mut buf = vec![0u8; bytes];
    for _ in 0..MAX_CANDIDATES {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let mut candidate = BigUint::from_bytes_be(&buf);
        candidate.set_bit(bits as u64 - 1, true);
        candidate.set_bit(bits as u64 - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(PaillierError::PrimeSearchExhausted { attempts: MAX_CANDIDATES })
}

/// Miller-Rabin with random bases after trial division by small primes.
pub(super) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    if n == &two {
        return true;
    }
    if n.is_even() {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p) == BigUint::ZERO {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let span = n - 3u32;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn trial_division(n: u64) -> bool {
        n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
    }

    #[test]
    fn agrees_with_trial_division() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 0u64..5000 {
            assert_eq!(is_probable_prime(&BigUint::from(n), &mut rng), trial_division(n), "n = {n}");
        }
    }

    #[test]
    fn random_prime_has_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for bits in [8usize, 17, 64, 128] {
            let p = random_prime(bits, &mut rng).unwrap();
            assert_eq!(p.bits() as usize, bits);
            assert!(p.bit(bits as u64 - 2));
        }
    }
}
