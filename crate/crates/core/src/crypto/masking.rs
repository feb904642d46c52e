//! Pairwise additive masking for secure aggregation over `Z_{2^64}`.
//!
//! Party `i` adds `Σ_{j>i} PRG(s_ij) − Σ_{j<i} PRG(s_ij)`; summed over all
//! parties every pairwise stream appears once with each sign and cancels.

use std::collections::BTreeMap;

use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use super::CryptoError;

/// 32-byte secret shared by one pair of parties.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSeed(pub [u8; 32]);

impl std::fmt::Debug for SharedSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSeed(..)")
    }
}

impl SharedSeed {
    /// Domain-separated child seed, e.g. one per training round.
    pub fn derive(&self, label: &str, index: u64) -> SharedSeed {
        let hk = Hkdf::<Sha256>::new(Some(label.as_bytes()), &self.0);
        let mut out = [0u8; 32];
        hk.expand(&index.to_be_bytes(), &mut out).expect("32 bytes is a valid HKDF length");
        SharedSeed(out)
    }

    /// Counter-mode keystream (ChaCha20) expanded to `dim` ring elements.
    pub fn expand(&self, dim: usize) -> Vec<u64> {
        let mut rng = ChaCha20Rng::from_seed(self.0);
        (0..dim).map(|_| rng.next_u64()).collect()
    }
}

/// X25519 key used to agree pairwise mask seeds.
pub struct MaskKeyPair {
    secret: StaticSecret,
    public: PublicKey,
}

impl MaskKeyPair {
    pub fn generate<R: RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        let secret = StaticSecret::random_from_rng(rng);
        let public = PublicKey::from(&secret);
        Self { secret, public }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        *self.public.as_bytes()
    }

    /// Shared seed with a peer; both sides compute the same value. `context`
    /// binds the seed to a job.
    pub fn agree(&self, peer_public: &[u8; 32], context: &[u8]) -> SharedSeed {
        let shared = self.secret.diffie_hellman(&PublicKey::from(*peer_public));
        let hk = Hkdf::<Sha256>::new(Some(b"kfed.mask-seed"), shared.as_bytes());
        let mut out = [0u8; 32];
        hk.expand(context, &mut out).expect("32 bytes is a valid HKDF length");
        SharedSeed(out)
    }
}

/// Mask vector for party `my_index` out of `party_count`.
///
/// `peer_seeds` must hold a seed for every other party index; a missing peer
/// aborts (there is no dropout recovery).
pub fn pairwise_masks(
    my_index: usize,
    party_count: usize,
    peer_seeds: &BTreeMap<usize, SharedSeed>,
    dim: usize,
) -> Result<Vec<u64>, CryptoError> {
    if my_index >= party_count {
        return Err(CryptoError::Protocol(format!("party index {my_index} out of range {party_count}")));
    }
    let mut mask = vec![0u64; dim];
    for j in (0..party_count).filter(|&j| j != my_index) {
        let seed = peer_seeds
            .get(&j)
            .ok_or_else(|| CryptoError::Protocol(format!("missing shared seed for peer {j}")))?;
        let stream = seed.expand(dim);
        if j > my_index {
            for (m, s) in mask.iter_mut().zip(&stream) {
                *m = m.wrapping_add(*s);
            }
        } else {
            for (m, s) in mask.iter_mut().zip(&stream) {
                *m = m.wrapping_sub(*s);
            }
        }
    }
    Ok(mask)
}

/// Componentwise `a + b mod 2^64`.
pub fn add_masked(a: &mut [u64], b: &[u64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = x.wrapping_add(*y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed_matrix(n: usize, rng: &mut ChaCha20Rng) -> Vec<BTreeMap<usize, SharedSeed>> {
        let mut seeds = vec![BTreeMap::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = [0u8; 32];
                rng.fill_bytes(&mut s);
                seeds[i].insert(j, SharedSeed(s));
                seeds[j].insert(i, SharedSeed(s));
            }
        }
        seeds
    }

    #[test]
    fn two_party_masks_are_negatives() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let seeds = seed_matrix(2, &mut rng);
        let m0 = pairwise_masks(0, 2, &seeds[0], 1).unwrap();
        let m1 = pairwise_masks(1, 2, &seeds[1], 1).unwrap();
        assert_eq!(m0[0].wrapping_add(m1[0]), 0);
        let (a, b) = (17u64, 25u64);
        assert_eq!(a.wrapping_add(m0[0]).wrapping_add(b.wrapping_add(m1[0])), 42);
    }

    #[test]
    fn five_parties_cancel() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let seeds = seed_matrix(5, &mut rng);
        let mut total = vec![0u64; 100];
        for (i, s) in seeds.iter().enumerate() {
            add_masked(&mut total, &pairwise_masks(i, 5, s, 100).unwrap());
        }
        assert!(total.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_party_mask_is_zero() {
        let m = pairwise_masks(0, 1, &BTreeMap::new(), 8).unwrap();
        assert_eq!(m, vec![0; 8]);
    }

    #[test]
    fn missing_peer_aborts() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut seeds = seed_matrix(3, &mut rng);
        seeds[0].remove(&2);
        assert!(matches!(pairwise_masks(0, 3, &seeds[0], 4), Err(CryptoError::Protocol(_))));
    }

    #[test]
    fn key_agreement_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = MaskKeyPair::generate(&mut rng);
        let b = MaskKeyPair::generate(&mut rng);
        assert_eq!(a.agree(&b.public_bytes(), b"job"), b.agree(&a.public_bytes(), b"job"));
        assert_ne!(a.agree(&b.public_bytes(), b"job"), a.agree(&b.public_bytes(), b"other"));
    }

    #[test]
    fn derived_round_seeds_differ() {
        let s = SharedSeed([9; 32]);
        assert_ne!(s.derive("round", 1), s.derive("round", 2));
        assert_eq!(s.derive("round", 1), s.derive("round", 1));
    }
}
