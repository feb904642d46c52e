//! Probabilistic primality testing and prime generation over `BigUint`.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// Miller-Rabin with `rounds` random bases, preceded by trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in SMALL_PRIMES.iter() {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
            if x.is_one() {
                return false;
            }
        }
        return false;
    }
    true
}

fn mr_rounds(bits: u64) -> usize {
    match bits {
        0..=64 => 20,
        65..=512 => 12,
        _ => 8,
    }
}

/// Random prime with exactly `bits` bits (top bit set). Returns `None` after
/// `max_attempts` candidates.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, max_attempts: usize, rng: &mut R) -> Option<BigUint> {
    if bits < 2 {
        return None;
    }
    let rounds = mr_rounds(bits);
    for _ in 0..max_attempts {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        if bits > 2 {
            candidate.set_bit(0, true);
        }
        if is_probable_prime(&candidate, rounds, rng) {
            return Some(candidate);
        }
    }
    None
}

/// Random safe prime `p = 2q + 1` of `bits` bits. Slow beyond a few hundred bits.
pub fn random_safe_prime<R: RngCore + ?Sized>(
    bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Option<BigUint> {
    let rounds = mr_rounds(bits);
    for _ in 0..max_attempts {
        let mut q = rng.gen_biguint(bits - 1);
        q.set_bit(bits - 2, true);
        q.set_bit(0, true);
        // q must be 2 mod 3, otherwise 3 | 2q+1
        if (&q % 3u32) != BigUint::from(2u32) {
            continue;
        }
        let p: BigUint = (&q << 1) + 1u32;
        if is_probable_prime(&q, 2, rng)
            && is_probable_prime(&p, rounds, rng)
            && is_probable_prime(&q, rounds, rng)
        {
            return Some(p);
        }
    }
    None
}

/// Modular inverse via the extended Euclidean algorithm.
pub fn mod_inverse(a: &BigUint, modulus: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let m = BigInt::from(modulus.clone());
    let e = BigInt::from(a % modulus).extended_gcd(&m);
    if !e.gcd.is_one() {
        return None;
    }
    let x = e.x.mod_floor(&m);
    x.to_biguint()
}

/// Jacobi symbol `(a/n)` for odd `n`; returns -1, 0 or 1.
pub fn jacobi(a: &BigUint, n: &BigUint) -> i8 {
    assert!(n.is_odd(), "jacobi symbol needs an odd modulus");
    let mut a = a % n;
    let mut n = n.clone();
    let mut t = 1i8;
    while !a.is_zero() {
        let tz = a.trailing_zeros().unwrap_or(0);
        if tz > 0 {
            a >>= tz;
            let r = (&n % 8u32).to_u32_digits().first().copied().unwrap_or(0);
            if tz % 2 == 1 && (r == 3 || r == 5) {
                t = -t;
            }
        }
        std::mem::swap(&mut a, &mut n);
        let a4 = (&a % 4u32).to_u32_digits().first().copied().unwrap_or(0);
        let n4 = (&n % 4u32).to_u32_digits().first().copied().unwrap_or(0);
        if a4 == 3 && n4 == 3 {
            t = -t;
        }
        a %= &n;
    }
    if n.is_one() {
        t
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn classifies_small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let primes: Vec<u32> = (0..400u32)
            .filter(|&n| is_probable_prime(&BigUint::from(n), 10, &mut rng))
            .collect();
        let brute: Vec<u32> = (0..400u32)
            .filter(|&n| n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0))
            .collect();
        assert_eq!(primes, brute);
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for c in [561u32, 1105, 1729, 2465, 2821, 6601, 8911] {
            assert!(!is_probable_prime(&BigUint::from(c), 10, &mut rng), "{c}");
        }
    }

    #[test]
    fn generated_prime_has_requested_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let p = random_prime(128, 10_000, &mut rng).unwrap();
        assert_eq!(p.bits(), 128);
    }

    #[test]
    fn inverse_of_small_values() {
        let inv = mod_inverse(&BigUint::from(12u32), &BigUint::from(35u32)).unwrap();
        assert_eq!(inv, BigUint::from(3u32));
        assert!(mod_inverse(&BigUint::from(7u32), &BigUint::from(35u32)).is_none());
    }

    #[test]
    fn jacobi_matches_euler_criterion() {
        let p = BigUint::from(1_000_003u32);
        let e = (&p - 1u32) >> 1;
        for a in 1..500u32 {
            let a = BigUint::from(a);
            let euler = a.modpow(&e, &p);
            let expected = if euler.is_one() { 1 } else { -1 };
            assert_eq!(jacobi(&a, &p), expected);
        }
        // composite modulus: (2/15) = (2/3)(2/5) = 1, (7/15) = (7/3)(7/5) = -1
        assert_eq!(jacobi(&BigUint::from(2u32), &BigUint::from(15u32)), 1);
        assert_eq!(jacobi(&BigUint::from(7u32), &BigUint::from(15u32)), -1);
        assert_eq!(jacobi(&BigUint::from(5u32), &BigUint::from(15u32)), 0);
    }
}
