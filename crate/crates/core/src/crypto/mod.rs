//! Cryptographic primitives shared by every federation level.
//!
//! All functions are pure over their inputs plus an explicit RNG handle.

pub mod dp;
pub mod fixed_point;
pub mod group;
pub mod masking;
pub mod paillier;
pub mod primes;

use thiserror::Error;

pub use dp::{clip_l2, dp_perturb, DpMechanism, DpParams};
pub use fixed_point::SignedFixedPoint;
pub use group::{BlindingKey, GroupElement, SafePrimeGroup};
pub use masking::{pairwise_masks, MaskKeyPair, SharedSeed};
pub use paillier::{he_add, he_scalar_mul, Ciphertext, KeyId, PaillierKeyPair, PaillierPrivateKey, PaillierPublicKey};

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("ciphertext key mismatch: expected {expected}, found {found}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("prime generation failed after bounded retries")]
    KeyGeneration,
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}
