//! Paillier additively homomorphic encryption with generator `g = n + 1`.
//!
//! With `g = n + 1`, `g^m mod n^2 = 1 + m*n`, so encryption costs a single
//! modular exponentiation `r^n mod n^2`. The key owner can do even that
//! through CRT over `p^2` and `q^2` (see [`PaillierPrivateKey::encrypt`]).

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::primes::{mod_inverse, random_prime};
use super::CryptoError;

/// Smallest modulus accepted outside of toy mode.
pub const MIN_SECURE_BITS: u64 = 256;
/// Production default modulus size.
pub const DEFAULT_KEY_BITS: u64 = 2048;

const PRIME_ATTEMPTS: usize = 100_000;
const KEYGEN_RETRIES: usize = 64;

/// Identifier of a public key: the first 8 bytes of SHA-256 over `n`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 8]);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        KeyId(id)
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Public half: modulus `n` (generator is implicitly `n + 1`).
#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_sq: BigUint,
    half_n: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierPublicKey")
            .field("bits", &self.n.bits())
            .field("key_id", &self.key_id)
            .finish()
    }
}

impl PaillierPublicKey {
    /// Rebuilds a public key from its modulus. Rejects even or tiny moduli.
    pub fn from_modulus(n: BigUint) -> Result<Self, CryptoError> {
        if n.bits() < 4 || n.is_even() {
            return Err(CryptoError::InvalidKey("modulus must be odd and at least 4 bits".into()));
        }
        let n_sq = &n * &n;
        let half_n = &n >> 1;
        let key_id = KeyId::of_modulus(&n);
        Ok(Self { n, n_sq, half_n, key_id })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_sq
    }

    /// `floor(n / 2)`; plaintexts above this decode as negative.
    pub fn half_n(&self) -> &BigUint {
        &self.half_n
    }

    pub fn generator(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    fn check_plaintext(&self, m: &BigUint) -> Result<(), CryptoError> {
        if m >= &self.n {
            return Err(CryptoError::Domain(format!(
                "plaintext must lie in [0, n) for a {}-bit modulus",
                self.n.bits()
            )));
        }
        Ok(())
    }

    fn check_key(&self, c: &Ciphertext) -> Result<(), CryptoError> {
        if c.key_id != self.key_id {
            return Err(CryptoError::KeyMismatch { expected: self.key_id, found: c.key_id });
        }
        Ok(())
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `(1 + m n) mod n^2`
    fn g_pow(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + m * &self.n) % &self.n_sq
    }

    /// Randomized encryption of `m ∈ [0, n)`.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        let r = self.random_unit(rng);
        self.encrypt_with_randomness(m, &r)
    }

    /// Encryption with caller-chosen randomness `r` (must be a unit mod `n`).
    pub fn encrypt_with_randomness(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check_plaintext(m)?;
        if r.is_zero() || !r.gcd(&self.n).is_one() {
            return Err(CryptoError::Domain("randomness must be a unit modulo n".into()));
        }
        let rn = r.modpow(&self.n, &self.n_sq);
        let value = self.g_pow(m) * rn % &self.n_sq;
        Ok(Ciphertext { value, key_id: self.key_id })
    }

    /// `E(a) ⊕ E(b) = E(a + b mod n)`
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
        self.check_key(c1)?;
        self.check_key(c2)?;
        if c1.key_id != c2.key_id {
            return Err(CryptoError::KeyMismatch { expected: c1.key_id, found: c2.key_id });
        }
        Ok(Ciphertext { value: &c1.value * &c2.value % &self.n_sq, key_id: self.key_id })
    }

    /// Adds a plaintext constant without fresh randomness.
    pub fn add_plain(&self, c: &Ciphertext, m: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check_key(c)?;
        self.check_plaintext(m)?;
        Ok(Ciphertext { value: &c.value * self.g_pow(m) % &self.n_sq, key_id: self.key_id })
    }

    /// `k ⊗ E(a) = E(k a mod n)` for `k ∈ [0, n)`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
        self.check_key(c)?;
        self.check_plaintext(k)?;
        Ok(Ciphertext { value: c.value.modpow(k, &self.n_sq), key_id: self.key_id })
    }

    /// Encryption of zero with no randomness; the neutral element for `add`.
    pub fn zero(&self) -> Ciphertext {
        Ciphertext { value: BigUint::one(), key_id: self.key_id }
    }

    /// Computes `E(Σ k_i a_i)` for signed integer coefficients.
    ///
    /// Positive and negative coefficients are accumulated separately so the
    /// exponents stay as wide as `|k_i|` rather than `n - |k_i|`; a single
    /// modular inverse combines the two products.
    pub fn linear_combination(&self, cts: &[Ciphertext], coeffs: &[i128]) -> Result<Ciphertext, CryptoError> {
        if cts.len() != coeffs.len() {
            return Err(CryptoError::Domain(format!(
                "{} ciphertexts but {} coefficients",
                cts.len(),
                coeffs.len()
            )));
        }
        let mut pos = BigUint::one();
        let mut neg = BigUint::one();
        for (c, &k) in cts.iter().zip(coeffs) {
            self.check_key(c)?;
            if k == 0 {
                continue;
            }
            let e = BigUint::from(k.unsigned_abs());
            if e >= self.n {
                return Err(CryptoError::Domain("coefficient exceeds modulus".into()));
            }
            let term = if e.is_one() { c.value.clone() } else { c.value.modpow(&e, &self.n_sq) };
            if k > 0 {
                pos = pos * term % &self.n_sq;
            } else {
                neg = neg * term % &self.n_sq;
            }
        }
        if !neg.is_one() {
            let inv = mod_inverse(&neg, &self.n_sq)
                .ok_or_else(|| CryptoError::Domain("ciphertext is not a unit".into()))?;
            pos = pos * inv % &self.n_sq;
        }
        Ok(Ciphertext { value: pos, key_id: self.key_id })
    }

    /// Validates a received ciphertext value: in range and a unit mod `n^2`.
    pub fn ciphertext_from_value(&self, value: BigUint) -> Result<Ciphertext, CryptoError> {
        if value.is_zero() || value >= self.n_sq || !value.gcd(&self.n).is_one() {
            return Err(CryptoError::Domain("value is not a unit modulo n^2".into()));
        }
        Ok(Ciphertext { value, key_id: self.key_id })
    }
}

/// Private half. Holds the factorization for CRT-accelerated encryption.
#[derive(Clone)]
pub struct PaillierPrivateKey {
    public: PaillierPublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    p_sq: BigUint,
    q_sq: BigUint,
    n_mod_phi_p_sq: BigUint,
    n_mod_phi_q_sq: BigUint,
    p_sq_inv_mod_q_sq: BigUint,
}

impl fmt::Debug for PaillierPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierPrivateKey").field("key_id", &self.public.key_id).finish_non_exhaustive()
    }
}

impl PaillierPrivateKey {
    pub fn public_key(&self) -> &PaillierPublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    /// `m = L(c^λ mod n^2) · μ mod n`, with `L(u) = (u - 1) / n`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, CryptoError> {
        let pk = &self.public;
        pk.check_key(c)?;
        let u = c.value.modpow(&self.lambda, &pk.n_sq);
        if u.is_zero() {
            return Err(CryptoError::Domain("ciphertext is not a unit".into()));
        }
        let (l, rem) = (u - 1u32).div_rem(&pk.n);
        if !rem.is_zero() {
            return Err(CryptoError::Domain("ciphertext is not a valid encryption".into()));
        }
        Ok(l * &self.mu % &pk.n)
    }

    /// Same distribution as [`PaillierPublicKey::encrypt`], computing `r^n`
    /// modulo `p^2` and `q^2` separately.
    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, CryptoError> {
        let pk = &self.public;
        pk.check_plaintext(m)?;
        let r = pk.random_unit(rng);
        let rp = (&r % &self.p_sq).modpow(&self.n_mod_phi_p_sq, &self.p_sq);
        let rq = (&r % &self.q_sq).modpow(&self.n_mod_phi_q_sq, &self.q_sq);
        // Garner recombination
        let diff = (rq + &self.q_sq - (&rp % &self.q_sq)) % &self.q_sq;
        let h = diff * &self.p_sq_inv_mod_q_sq % &self.q_sq;
        let rn = rp + h * &self.p_sq;
        let value = pk.g_pow(m) * rn % &pk.n_sq;
        Ok(Ciphertext { value, key_id: pk.key_id })
    }
}

/// A matched public/private key pair.
#[derive(Clone, Debug)]
pub struct PaillierKeyPair {
    private: PaillierPrivateKey,
}

impl PaillierKeyPair {
    /// Deterministic key generation from a 64-bit seed. `bits` must be at
    /// least [`MIN_SECURE_BITS`]; see [`PaillierKeyPair::generate_toy`].
    pub fn generate(bits: u64, rng_seed: u64) -> Result<Self, CryptoError> {
        if bits < MIN_SECURE_BITS {
            return Err(CryptoError::InvalidKey(format!(
                "{bits}-bit keys are only available through generate_toy"
            )));
        }
        Self::generate_unchecked(bits, rng_seed)
    }

    /// Test-only key sizes (8 bits and up). Never use for real data.
    pub fn generate_toy(bits: u64, rng_seed: u64) -> Result<Self, CryptoError> {
        if bits < 8 {
            return Err(CryptoError::InvalidKey("toy keys need at least 8 bits".into()));
        }
        Self::generate_unchecked(bits, rng_seed)
    }

    fn generate_unchecked(bits: u64, rng_seed: u64) -> Result<Self, CryptoError> {
        let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
        let p_bits = bits / 2;
        let q_bits = bits - p_bits;
        for _ in 0..KEYGEN_RETRIES {
            let p = random_prime(p_bits, PRIME_ATTEMPTS, &mut rng).ok_or(CryptoError::KeyGeneration)?;
            let q = random_prime(q_bits, PRIME_ATTEMPTS, &mut rng).ok_or(CryptoError::KeyGeneration)?;
            if p == q {
                continue;
            }
            if (&p * &q).bits() != bits {
                continue;
            }
            if let Ok(kp) = Self::from_primes(p, q) {
                return Ok(kp);
            }
        }
        Err(CryptoError::KeyGeneration)
    }

    /// Builds a key pair from two distinct primes.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::InvalidKey("p and q must be distinct".into()));
        }
        let n = &p * &q;
        let p1 = &p - 1u32;
        let q1 = &q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(CryptoError::InvalidKey("gcd(n, (p-1)(q-1)) != 1".into()));
        }
        let lambda = p1.lcm(&q1);
        let mu = mod_inverse(&lambda, &n)
            .ok_or_else(|| CryptoError::InvalidKey("lambda is not invertible mod n".into()))?;
        let public = PaillierPublicKey::from_modulus(n)?;
        let p_sq = &p * &p;
        let q_sq = &q * &q;
        let n_mod_phi_p_sq = public.n() % (&p * &p1);
        let n_mod_phi_q_sq = public.n() % (&q * &q1);
        let p_sq_inv_mod_q_sq = mod_inverse(&p_sq, &q_sq)
            .ok_or_else(|| CryptoError::InvalidKey("p^2 not invertible mod q^2".into()))?;
        Ok(Self {
            private: PaillierPrivateKey {
                public,
                p,
                q,
                lambda,
                mu,
                p_sq,
                q_sq,
                n_mod_phi_p_sq,
                n_mod_phi_q_sq,
                p_sq_inv_mod_q_sq,
            },
        })
    }

    pub fn public_key(&self) -> &PaillierPublicKey {
        &self.private.public
    }

    pub fn private_key(&self) -> &PaillierPrivateKey {
        &self.private
    }

    pub fn key_id(&self) -> KeyId {
        self.private.public.key_id
    }
}

/// A Paillier ciphertext bound to the key that produced it.
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({}…, {})", &self.value.to_str_radix(16).chars().take(12).collect::<String>(), self.key_id)
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }
}

/// Free-function form of [`PaillierPublicKey::add`].
pub fn he_add(pk: &PaillierPublicKey, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
    pk.add(c1, c2)
}

/// Free-function form of [`PaillierPublicKey::scalar_mul`].
pub fn he_scalar_mul(pk: &PaillierPublicKey, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, CryptoError> {
    pk.scalar_mul(c, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PaillierKeyPair {
        PaillierKeyPair::from_primes(BigUint::from(5u32), BigUint::from(7u32)).unwrap()
    }

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    /// Direct `g^m r^n mod n^2`, independent of the `1 + mn` shortcut.
    fn oracle_encrypt(n: u64, m: u64, r: u64) -> u64 {
        let n2 = n * n;
        let mut acc = 1u64;
        for _ in 0..m {
            acc = acc * (n + 1) % n2;
        }
        for _ in 0..n {
            acc = acc * r % n2;
        }
        acc
    }

    #[test]
    fn toy_key_matches_hand_computation() {
        let kp = toy();
        assert_eq!(kp.public_key().n(), &big(35));
        assert_eq!(kp.public_key().generator(), big(36));
        assert_eq!(kp.private_key().lambda(), &big(12));
        assert_eq!(kp.private_key().mu(), &big(3));
    }

    #[test]
    fn zero_with_unit_randomness_is_one() {
        let kp = toy();
        let c = kp.public_key().encrypt_with_randomness(&big(0), &big(1)).unwrap();
        assert_eq!(c.value(), &big(1));
        assert_eq!(kp.private_key().decrypt(&c).unwrap(), big(0));
    }

    #[test]
    fn toy_encryption_matches_direct_oracle() {
        let kp = toy();
        for m in 0..35u64 {
            for r in [1u64, 2, 3, 4, 6, 8, 11, 34] {
                let c = kp.public_key().encrypt_with_randomness(&big(m), &big(r)).unwrap();
                assert_eq!(c.value(), &big(oracle_encrypt(35, m, r)), "m={m} r={r}");
                assert_eq!(kp.private_key().decrypt(&c).unwrap(), big(m));
            }
        }
    }

    #[test]
    fn toy_addition_and_scaling() {
        let kp = toy();
        let pk = kp.public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let c2 = pk.encrypt(&big(2), &mut rng).unwrap();
        let c3 = pk.encrypt(&big(3), &mut rng).unwrap();
        let sum = he_add(pk, &c2, &c3).unwrap();
        assert_eq!(kp.private_key().decrypt(&sum).unwrap(), big(5));
        assert_eq!(kp.private_key().decrypt(&he_scalar_mul(pk, &c3, &big(1)).unwrap()).unwrap(), big(3));
        assert_eq!(kp.private_key().decrypt(&he_scalar_mul(pk, &c3, &big(0)).unwrap()).unwrap(), big(0));
    }

    #[test]
    fn keygen_is_deterministic() {
        let a = PaillierKeyPair::generate_toy(64, 11).unwrap();
        let b = PaillierKeyPair::generate_toy(64, 11).unwrap();
        assert_eq!(a.public_key(), b.public_key());
        assert_eq!(a.private_key().lambda(), b.private_key().lambda());
        let c = PaillierKeyPair::generate_toy(64, 12).unwrap();
        assert_ne!(a.public_key(), c.public_key());
    }

    #[test]
    fn eight_bit_toy_key() {
        let kp = PaillierKeyPair::generate_toy(8, 5).unwrap();
        assert_eq!(kp.public_key().bits(), 8);
        let (p, q) = kp.private_key().primes();
        assert_ne!(p, q);
    }

    #[test]
    fn small_keys_refused_outside_toy_mode() {
        assert!(matches!(PaillierKeyPair::generate(64, 1), Err(CryptoError::InvalidKey(_))));
    }

    #[test]
    fn randomized_encryption() {
        let kp = PaillierKeyPair::generate(256, 9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = kp.public_key().encrypt(&big(42), &mut rng).unwrap();
        let b = kp.public_key().encrypt(&big(42), &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.private_key().decrypt(&a).unwrap(), kp.private_key().decrypt(&b).unwrap());
    }

    #[test]
    fn owner_encryption_decrypts() {
        let kp = PaillierKeyPair::generate(256, 21).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = rng.gen_biguint_below(kp.public_key().n());
            let c = kp.private_key().encrypt(&m, &mut rng).unwrap();
            assert_eq!(kp.private_key().decrypt(&c).unwrap(), m);
        }
    }

    #[test]
    fn key_mismatch_and_domain_errors() {
        let a = PaillierKeyPair::generate(256, 1).unwrap();
        let b = PaillierKeyPair::generate(256, 2).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let ca = a.public_key().encrypt(&big(1), &mut rng).unwrap();
        let cb = b.public_key().encrypt(&big(1), &mut rng).unwrap();
        assert!(matches!(a.public_key().add(&ca, &cb), Err(CryptoError::KeyMismatch { .. })));
        assert!(matches!(b.private_key().decrypt(&ca), Err(CryptoError::KeyMismatch { .. })));
        let too_big = a.public_key().n().clone();
        assert!(matches!(a.public_key().encrypt(&too_big, &mut rng), Err(CryptoError::Domain(_))));
    }

    #[test]
    fn linear_combination_with_signed_coefficients() {
        let kp = PaillierKeyPair::generate(256, 31).unwrap();
        let pk = kp.public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let values = [5u64, 7, 11, 13];
        let coeffs = [3i128, -2, 0, -1];
        let cts: Vec<_> = values.iter().map(|&v| pk.encrypt(&big(v), &mut rng).unwrap()).collect();
        let c = pk.linear_combination(&cts, &coeffs).unwrap();
        // 15 - 14 + 0 - 13 = -12
        let expected = pk.n() - 12u32;
        assert_eq!(kp.private_key().decrypt(&c).unwrap(), expected);
    }
}
