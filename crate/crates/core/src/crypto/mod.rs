//! Finite-field arithmetic, Shamir sharing, toy Diffie-Hellman key agreement
//! and the seeded mask generator used by the masking layer.
//!
//! Nothing here is hardened. The key-agreement group is deliberately small
//! (a 61-bit safe prime); privacy of the aggregate comes from the one-time
//! masks, not from the hardness of the group.

mod field;
mod key_agreement;
mod prg;
mod shamir;

pub use field::{is_prime, PrimeField};
pub use key_agreement::{derive_pairwise_seed, GroupParams, KeyPair, PublicKey, SecretKey};
pub use prg::{prg_expand, RingModulus, Seed};
pub use shamir::{shamir_reconstruct, shamir_share, SecretShare};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("{0} is not a valid prime modulus")]
    NotPrime(u64),

    #[error("invalid key-agreement group parameters: {0}")]
    InvalidGroup(&'static str),

    #[error("keys were generated under different group parameters")]
    GroupMismatch,

    #[error("a user cannot agree a pairwise seed with itself")]
    SelfPairing,

    #[error("ring modulus must be at least 2, got {0}")]
    InvalidModulus(u64),

    #[error("ring modulus for {coalition} users at {levels} levels overflows 64 bits")]
    ModulusOverflow { coalition: usize, levels: u64 },

    #[error("cannot expand a seed into an empty vector")]
    EmptyOutput,

    #[error("threshold {threshold} is infeasible for {count} shares")]
    InfeasibleThreshold { threshold: usize, count: usize },

    #[error("secret {secret} does not fit the share field of order {modulus}")]
    SecretOutOfRange { secret: u64, modulus: u64 },

    #[error("need {needed} shares to reconstruct, got {got}")]
    InsufficientShares { needed: usize, got: usize },

    #[error("malformed shares: {0}")]
    MalformedShares(&'static str),
}
