//! Prime-order subgroup of `Z_p^*` for a safe prime `p = 2q + 1`, used for
//! commutative (Diffie-Hellman style) blinding in private set intersection.
//!
//! Elements are quadratic residues mod `p`; hashing squares a wide SHA-256
//! expansion so every item lands in the order-`q` subgroup.

use num_bigint::{BigUint, RandBigInt};
use num_traits::One;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::primes::{is_probable_prime, jacobi, random_safe_prime};
use super::CryptoError;

/// RFC 3526 group 14 (2048-bit MODP) safe prime.
const MODP_2048_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

/// A 256-bit safe prime for fast tests. Not for production data.
const TEST_256_HEX: &str = "8733DA0B50AF28B55AF94A83637125C89C5DF5E9F901D94AB505BD040D677EFF";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SafePrimeGroup {
    p: BigUint,
    q: BigUint,
    element_len: usize,
}

/// An element of the order-`q` subgroup.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

impl SafePrimeGroup {
    /// Validates `p` as a safe prime. Costly for 2048-bit inputs.
    pub fn new(p: BigUint) -> Result<Self, CryptoError> {
        let mut rng = ChaCha20Rng::seed_from_u64(0x5afe);
        if p.bits() < 16 {
            return Err(CryptoError::InvalidParameter("group modulus too small".into()));
        }
        let q = (&p - 1u32) >> 1;
        if !is_probable_prime(&p, 16, &mut rng) || !is_probable_prime(&q, 16, &mut rng) {
            return Err(CryptoError::InvalidParameter("modulus is not a safe prime".into()));
        }
        Ok(Self::unchecked(p))
    }

    fn unchecked(p: BigUint) -> Self {
        let q = (&p - 1u32) >> 1;
        let element_len = p.bits().div_ceil(8) as usize;
        Self { p, q, element_len }
    }

    pub fn modp_2048() -> Self {
        Self::unchecked(BigUint::parse_bytes(MODP_2048_HEX.as_bytes(), 16).expect("constant"))
    }

    pub fn test_256() -> Self {
        Self::unchecked(BigUint::parse_bytes(TEST_256_HEX.as_bytes(), 16).expect("constant"))
    }

    /// Fresh safe-prime group; only practical for small sizes.
    pub fn generate(bits: u64, seed: u64) -> Result<Self, CryptoError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = random_safe_prime(bits, 1_000_000, &mut rng).ok_or(CryptoError::KeyGeneration)?;
        Ok(Self::unchecked(p))
    }

    /// Looks up a group by name: `modp2048` or `test256`.
    pub fn named(name: &str) -> Result<Self, CryptoError> {
        match name {
            "modp2048" => Ok(Self::modp_2048()),
            "test256" => Ok(Self::test_256()),
            other => Err(CryptoError::InvalidParameter(format!("unknown group {other:?}"))),
        }
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn order(&self) -> &BigUint {
        &self.q
    }

    /// Fixed width of an encoded element in bytes.
    pub fn element_len(&self) -> usize {
        self.element_len
    }

    /// Hash-to-group: wide SHA-256 expansion reduced mod `p`, then squared.
    pub fn hash_to_group(&self, item: &[u8]) -> GroupElement {
        let wide = self.element_len + 16;
        let mut counter = 0u32;
        loop {
            let mut buf = Vec::with_capacity(wide + 32);
            let mut block = 0u32;
            while buf.len() < wide {
                let mut h = Sha256::new();
                h.update(b"kfed.h2g");
                h.update(counter.to_be_bytes());
                h.update(block.to_be_bytes());
                h.update((item.len() as u64).to_be_bytes());
                h.update(item);
                buf.extend_from_slice(&h.finalize());
                block += 1;
            }
            buf.truncate(wide);
            let x = BigUint::from_bytes_be(&buf) % &self.p;
            let y = (&x * &x) % &self.p;
            if y > BigUint::one() {
                return GroupElement(y);
            }
            counter += 1;
        }
    }

    /// `elem^key mod p`
    pub fn blind(&self, elem: &GroupElement, key: &BlindingKey) -> GroupElement {
        GroupElement(elem.0.modpow(&key.exponent, &self.p))
    }

    pub fn encode(&self, elem: &GroupElement) -> Vec<u8> {
        let raw = elem.0.to_bytes_be();
        let mut out = vec![0u8; self.element_len - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    /// Decodes a fixed-width element and checks subgroup membership.
    pub fn decode(&self, bytes: &[u8]) -> Result<GroupElement, CryptoError> {
        if bytes.len() != self.element_len {
            return Err(CryptoError::Encoding(format!(
                "group element must be {} bytes, got {}",
                self.element_len,
                bytes.len()
            )));
        }
        let v = BigUint::from_bytes_be(bytes);
        // for a safe prime the order-q subgroup is exactly the quadratic residues
        if v <= BigUint::one() || v >= self.p || jacobi(&v, &self.p) != 1 {
            return Err(CryptoError::Encoding("value is not in the prime-order subgroup".into()));
        }
        Ok(GroupElement(v))
    }
}

/// Secret blinding exponent in `[1, q - 1]`.
#[derive(Clone)]
pub struct BlindingKey {
    exponent: BigUint,
}

impl std::fmt::Debug for BlindingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BlindingKey(..)")
    }
}

impl BlindingKey {
    /// Uniform exponent in `[2, q - 1]`.
    pub fn random<R: RngCore + ?Sized>(group: &SafePrimeGroup, rng: &mut R) -> Self {
        let exponent = rng.gen_biguint_range(&BigUint::from(2u32), group.order());
        Self { exponent }
    }

    pub fn from_exponent(group: &SafePrimeGroup, exponent: BigUint) -> Result<Self, CryptoError> {
        if exponent < BigUint::one() || &exponent >= group.order() {
            return Err(CryptoError::InvalidParameter("blinding exponent must lie in [1, q)".into()));
        }
        Ok(Self { exponent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn embedded_groups_are_safe_primes() {
        let g = SafePrimeGroup::test_256();
        assert!(SafePrimeGroup::new(g.modulus().clone()).is_ok());
        assert_eq!(g.modulus().bits(), 256);
        let big = SafePrimeGroup::modp_2048();
        assert_eq!(big.modulus().bits(), 2048);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(is_probable_prime(big.order(), 4, &mut rng));
    }

    #[test]
    fn non_safe_prime_rejected() {
        // 23 = 2*11 + 1 is safe; 29 is prime but 14 is not
        assert!(SafePrimeGroup::new(BigUint::from(29u32)).is_err());
    }

    #[test]
    fn hashed_items_lie_in_subgroup() {
        let g = SafePrimeGroup::test_256();
        for i in 0..20u32 {
            let e = g.hash_to_group(&i.to_be_bytes());
            assert!(e.value().modpow(g.order(), g.modulus()).is_one());
            assert_eq!(g.decode(&g.encode(&e)).unwrap(), e);
        }
    }

    #[test]
    fn blinding_commutes() {
        let g = SafePrimeGroup::test_256();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for i in 0..100u32 {
            let x = g.hash_to_group(format!("item-{i}").as_bytes());
            let a = BlindingKey::random(&g, &mut rng);
            let b = BlindingKey::random(&g, &mut rng);
            assert_eq!(g.blind(&g.blind(&x, &a), &b), g.blind(&g.blind(&x, &b), &a));
        }
    }

    #[test]
    fn unit_exponent_is_identity() {
        let g = SafePrimeGroup::test_256();
        let one = BlindingKey::from_exponent(&g, BigUint::one()).unwrap();
        let x = g.hash_to_group(b"abc");
        assert_eq!(g.blind(&x, &one), x);
    }

    #[test]
    fn blinded_values_do_not_collide() {
        let g = SafePrimeGroup::test_256();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = BlindingKey::random(&g, &mut rng);
        let seen: HashSet<_> = (0..2000u32).map(|i| g.blind(&g.hash_to_group(&i.to_le_bytes()), &key)).collect();
        assert_eq!(seen.len(), 2000);
    }

    #[test]
    fn decode_rejects_non_members() {
        let g = SafePrimeGroup::test_256();
        let mut bytes = vec![0u8; g.element_len()];
        *bytes.last_mut().unwrap() = 1;
        assert!(g.decode(&bytes).is_err());
        assert!(g.decode(&[1, 2, 3]).is_err());
    }
}
