use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::field::{is_prime, pow_mod};
use super::{CryptoError, Seed};

/// A prime-order subgroup of `Z_p^*` with `p = 2q + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupParams {
    pub modulus: u64,
    pub order: u64,
    pub generator: u64,
}

impl GroupParams {
    /// 61-bit safe prime with generator 4 (a quadratic residue, so of order q).
    /// Not cryptographically hard.
    pub const TOY_61: GroupParams = GroupParams {
        modulus: 2_305_843_009_213_691_579,
        order: 1_152_921_504_606_845_789,
        generator: 4,
    };

    pub fn new(modulus: u64, order: u64, generator: u64) -> Result<Self, CryptoError> {
        if !is_prime(order) || !is_prime(modulus) || order.checked_mul(2).map(|q| q + 1) != Some(modulus) {
            return Err(CryptoError::InvalidGroup("modulus must be a safe prime 2q + 1"));
        }
        if generator <= 1 || generator >= modulus || pow_mod(generator, order, modulus) != 1 {
            return Err(CryptoError::InvalidGroup("generator must have order q"));
        }
        Ok(Self {
            modulus,
            order,
            generator,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SecretKey {
    exponent: u64,
    params: GroupParams,
}

impl SecretKey {
    /// Rebuild a key from a reconstructed exponent.
    pub fn from_exponent(exponent: u64, params: GroupParams) -> Self {
        Self { exponent, params }
    }

    pub fn exponent(&self) -> u64 {
        self.exponent
    }

    pub fn params(&self) -> GroupParams {
        self.params
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey {
            value: pow_mod(self.params.generator, self.exponent, self.params.modulus),
            params: self.params,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PublicKey {
    value: u64,
    params: GroupParams,
}

impl PublicKey {
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn params(&self) -> GroupParams {
        self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub secret: SecretKey,
    pub public: PublicKey,
}

impl KeyPair {
    pub fn generate<R: Rng + ?Sized>(params: GroupParams, rng: &mut R) -> Self {
        let secret = SecretKey {
            exponent: rng.random_range(1..params.order),
            params,
        };
        Self {
            public: secret.public_key(),
            secret,
        }
    }
}

/// Agree a pairwise seed from one side's secret key and the other side's
/// public key. Symmetric: `derive(sk_i, pk_j) == derive(sk_j, pk_i)`.
pub fn derive_pairwise_seed(secret: &SecretKey, public: &PublicKey) -> Result<Seed, CryptoError> {
    if secret.params != public.params {
        return Err(CryptoError::GroupMismatch);
    }
    if secret.public_key().value == public.value {
        return Err(CryptoError::SelfPairing);
    }
    let shared = pow_mod(public.value, secret.exponent, secret.params.modulus);
    let digest = Sha256::new()
        .chain_update(b"heterosag/pairwise-seed")
        .chain_update(shared.to_le_bytes())
        .finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    Ok(Seed(u64::from_le_bytes(word)))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn toy_group_is_well_formed() {
        let p = GroupParams::TOY_61;
        assert_eq!(GroupParams::new(p.modulus, p.order, p.generator), Ok(p));
        assert!(GroupParams::new(23, 11, 1).is_err());
        assert!(GroupParams::new(23, 11, 4).is_ok());
        assert!(GroupParams::new(21, 10, 4).is_err());
    }

    #[test]
    fn agreement_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = KeyPair::generate(GroupParams::TOY_61, &mut rng);
            let b = KeyPair::generate(GroupParams::TOY_61, &mut rng);
            assert_eq!(
                derive_pairwise_seed(&a.secret, &b.public).unwrap(),
                derive_pairwise_seed(&b.secret, &a.public).unwrap()
            );
        }
    }

    #[test]
    fn distinct_partners_give_distinct_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let me = KeyPair::generate(GroupParams::TOY_61, &mut rng);
        let seeds: HashSet<Seed> = (0..100)
            .map(|_| {
                let other = KeyPair::generate(GroupParams::TOY_61, &mut rng);
                derive_pairwise_seed(&me.secret, &other.public).unwrap()
            })
            .collect();
        assert_eq!(seeds.len(), 100);
    }

    #[test]
    fn self_pairing_and_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let me = KeyPair::generate(GroupParams::TOY_61, &mut rng);
        assert_eq!(
            derive_pairwise_seed(&me.secret, &me.public),
            Err(CryptoError::SelfPairing)
        );
        let small = GroupParams::new(23, 11, 4).unwrap();
        let other = KeyPair::generate(small, &mut rng);
        assert_eq!(
            derive_pairwise_seed(&me.secret, &other.public),
            Err(CryptoError::GroupMismatch)
        );
    }
}
