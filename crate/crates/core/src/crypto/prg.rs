use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CryptoError;

/// A pairwise seed `s_ij` or a private seed `b_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl Seed {
    /// Independent sub-seed for one (round, segment level) pair, so masks at
    /// different levels, each with its own modulus, never share a stream.
    pub fn for_level(self, round: u64, level: usize) -> Seed {
        let digest = Sha256::new()
            .chain_update(b"heterosag/level-seed")
            .chain_update(self.0.to_le_bytes())
            .chain_update(round.to_le_bytes())
            .chain_update((level as u64).to_le_bytes())
            .finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        Seed(u64::from_le_bytes(word))
    }
}

/// The encoding modulus `R` of one coalition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RingModulus(u64);

impl RingModulus {
    pub fn new(r: u64) -> Result<Self, CryptoError> {
        if r < 2 {
            return Err(CryptoError::InvalidModulus(r));
        }
        Ok(Self(r))
    }

    /// `R = |S| (K - 1) + 1`: the smallest ring holding every possible sum of
    /// `coalition` level indices drawn from `[0, K - 1]`.
    pub fn for_coalition(coalition: usize, levels: u64) -> Result<Self, CryptoError> {
        let overflow = CryptoError::ModulusOverflow { coalition, levels };
        let r = (coalition as u64)
            .checked_mul(levels.saturating_sub(1))
            .and_then(|v| v.checked_add(1))
            .ok_or(overflow)?;
        Self::new(r)
    }

    pub fn get(self) -> u64 {
        self.0
    }

    /// Bits per transmitted symbol, `ceil(log2 R)`.
    pub fn bits(self) -> u32 {
        u64::BITS - (self.0 - 1).leading_zeros()
    }

    pub fn add(self, a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % self.0 as u128) as u64
    }

    pub fn sub(self, a: u64, b: u64) -> u64 {
        self.add(a, self.0 - b % self.0)
    }
}

/// Expand `seed` into `len` symbols uniform on `[0, R)`.
///
/// ChaCha20 keyed from the seed supplies 64-bit words; words above the
/// largest multiple of `R` are rejected so no residue is favoured.
pub fn prg_expand(seed: Seed, len: usize, modulus: RingModulus) -> Result<Vec<u64>, CryptoError> {
    if len == 0 {
        return Err(CryptoError::EmptyOutput);
    }
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"heterosag/prg")
        .chain_update(seed.0.to_le_bytes())
        .finalize()
        .into();
    let mut stream = ChaCha20Rng::from_seed(key);
    let r = modulus.get();
    let zone = u64::MAX - (u64::MAX % r + 1) % r;
    Ok((0..len)
        .map(|_| loop {
            let word = stream.next_u64();
            if word <= zone {
                break word % r;
            }
        })
        .collect())
}
