use std::collections::BTreeSet;

use rand::Rng;

use super::{CryptoError, PrimeField};

/// One evaluation of a sharing polynomial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SecretShare {
    /// User whose secret this share belongs to.
    pub owner: usize,
    /// Evaluation point; never zero.
    pub index: u64,
    pub value: u64,
    pub threshold: usize,
}

/// Split `secret` into `count` shares, any `threshold` of which reconstruct it.
///
/// Share `j` is evaluated at `j + 1`, so the holder with user index `j`
/// receives the share at point `j + 1`.
pub fn shamir_share<R: Rng + ?Sized>(
    field: PrimeField,
    secret: u64,
    threshold: usize,
    count: usize,
    owner: usize,
    rng: &mut R,
) -> Result<Vec<SecretShare>, CryptoError> {
    if threshold == 0 || threshold > count || count as u64 >= field.modulus() {
        return Err(CryptoError::InfeasibleThreshold { threshold, count });
    }
    if secret >= field.modulus() {
        return Err(CryptoError::SecretOutOfRange {
            secret,
            modulus: field.modulus(),
        });
    }

    let mut coefficients = Vec::with_capacity(threshold);
    coefficients.push(secret);
    coefficients.extend((1..threshold).map(|_| rng.random_range(0..field.modulus())));

    Ok((1..=count as u64)
        .map(|x| {
            // Horner evaluation from the highest coefficient down.
            let value = coefficients
                .iter()
                .rev()
                .fold(0, |acc, &c| field.add(field.mul(acc, x), c));
            SecretShare {
                owner,
                index: x,
                value,
                threshold,
            }
        })
        .collect())
}

/// Lagrange interpolation at zero over the first `threshold` shares.
pub fn shamir_reconstruct(field: PrimeField, shares: &[SecretShare]) -> Result<u64, CryptoError> {
    let first = shares
        .first()
        .ok_or(CryptoError::InsufficientShares { needed: 1, got: 0 })?;
    let threshold = first.threshold;
    if shares
        .iter()
        .any(|s| s.threshold != threshold || s.owner != first.owner)
    {
        return Err(CryptoError::MalformedShares("mixed owners or thresholds"));
    }
    if shares.iter().any(|s| s.index % field.modulus() == 0) {
        return Err(CryptoError::MalformedShares("zero evaluation point"));
    }
    let distinct: BTreeSet<u64> = shares.iter().map(|s| s.index).collect();
    if distinct.len() != shares.len() {
        return Err(CryptoError::MalformedShares("duplicate evaluation point"));
    }
    if shares.len() < threshold {
        return Err(CryptoError::InsufficientShares {
            needed: threshold,
            got: shares.len(),
        });
    }

    let used = &shares[..threshold];
    let mut secret = 0;
    for (i, si) in used.iter().enumerate() {
        let mut num = 1;
        let mut den = 1;
        for (j, sj) in used.iter().enumerate() {
            if i != j {
                num = field.mul(num, sj.index);
                den = field.mul(den, field.sub(sj.index, si.index));
            }
        }
        let basis = field.mul(num, field.inv(den));
        secret = field.add(secret, field.mul(si.value, basis));
    }
    Ok(secret)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
            .collect()
    }

    #[test]
    fn any_threshold_subset_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = PrimeField::MERSENNE_61;
        for n in 1..=12 {
            for t in 1..=n {
                let secret = rng.random_range(0..field.modulus());
                let shares = shamir_share(field, secret, t, n, 0, &mut rng).unwrap();
                let picks = if n <= 8 {
                    subsets(n, t)
                } else {
                    (0..20)
                        .map(|_| {
                            let mut idx: Vec<usize> = (0..n).collect();
                            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
                            idx.truncate(t);
                            idx
                        })
                        .collect()
                };
                for pick in picks {
                    let chosen: Vec<_> = pick.iter().map(|&i| shares[i]).collect();
                    assert_eq!(shamir_reconstruct(field, &chosen).unwrap(), secret);
                }
            }
        }
    }

    #[test]
    fn single_share_degree_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shares = shamir_share(PrimeField::SMALL_257, 42, 1, 1, 3, &mut rng).unwrap();
        assert_eq!(shares.len(), 1);
        assert_eq!(shares[0].value, 42);
        assert_eq!(shamir_reconstruct(PrimeField::SMALL_257, &shares).unwrap(), 42);
    }

    #[test]
    fn overdetermined_set_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = PrimeField::MERSENNE_61;
        let shares = shamir_share(field, 123_456_789, 3, 7, 0, &mut rng).unwrap();
        assert_eq!(shamir_reconstruct(field, &shares[..5]).unwrap(), 123_456_789);
        assert_eq!(shamir_reconstruct(field, &shares[2..]).unwrap(), 123_456_789);
    }

    #[test]
    fn below_threshold_posterior_is_uniform() {
        // t = 3 over GF(257): for every pair of shares, every candidate secret
        // is consistent with exactly one completion of the polynomial.
        let field = PrimeField::SMALL_257;
        let p = field.modulus();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shares = shamir_share(field, 77, 3, 5, 0, &mut rng).unwrap();
        for pair in subsets(5, 2) {
            let (a, b) = (shares[pair[0]], shares[pair[1]]);
            let mut counts = vec![0u32; p as usize];
            for s in 0..p {
                for a1 in 0..p {
                    // a2 is pinned by the first share, then checked against the second.
                    let rest = field.sub(field.sub(a.value, s), field.mul(a1, a.index));
                    let a2 = field.mul(rest, field.inv(field.mul(a.index, a.index)));
                    let at_b = field.add(
                        field.add(s, field.mul(a1, b.index)),
                        field.mul(a2, field.mul(b.index, b.index)),
                    );
                    if at_b == b.value {
                        counts[s as usize] += 1;
                    }
                }
            }
            assert!(counts.iter().all(|&c| c == 1), "pair {pair:?}");
        }
    }

    #[test]
    fn tampered_share_changes_the_secret() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = PrimeField::MERSENNE_61;
        let mut shares = shamir_share(field, 99, 3, 5, 0, &mut rng).unwrap();
        shares[1].value = field.add(shares[1].value, 1);
        assert_ne!(shamir_reconstruct(field, &shares[..3]).unwrap(), 99);
    }

    #[test]
    fn error_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = PrimeField::SMALL_257;
        assert_eq!(
            shamir_share(field, 1, 4, 3, 0, &mut rng),
            Err(CryptoError::InfeasibleThreshold { threshold: 4, count: 3 })
        );
        let shares = shamir_share(field, 1, 3, 5, 0, &mut rng).unwrap();
        assert_eq!(
            shamir_reconstruct(field, &shares[..2]),
            Err(CryptoError::InsufficientShares { needed: 3, got: 2 })
        );
        let dup = [shares[0], shares[0], shares[1]];
        assert!(matches!(
            shamir_reconstruct(field, &dup),
            Err(CryptoError::MalformedShares(_))
        ));
    }
}
