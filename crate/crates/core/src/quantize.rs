//! Element-wise stochastic K-level quantizer and the real/integer mappings
//! around it.
//!
//! A value in `[r1, r2]` is rounded to one of its two neighbouring grid
//! points `T(l) = r1 + l * delta` with probabilities that make the result
//! unbiased. What travels through the masking layer is the level index `l`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizeError {
    #[error("quantizer needs at least 2 levels, got {0}")]
    TooFewLevels(u64),

    #[error("quantizer range [{lower}, {upper}] is empty or not finite")]
    BadRange { lower: f64, upper: f64 },

    #[error("input {0} is not finite")]
    NonFinite(f64),

    #[error("input {value} lies outside [{lower}, {upper}]")]
    OutOfRange { value: f64, lower: f64, upper: f64 },

    #[error("level {level} is outside [0, {max}]")]
    LevelOutOfRange { level: u64, max: u64 },

    #[error("aggregate {value} exceeds {max} for {survivors} survivors: decode corrupted")]
    AggregateOverflow { value: u64, max: u64, survivors: usize },
}

/// What to do with inputs outside `[r1, r2]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    #[default]
    Clip,
    Strict,
}

/// Rounding rule applied between grid points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Unbiased stochastic rounding.
    #[default]
    Stochastic,
    /// Round to the nearest grid point. Used for the effectively-unquantized
    /// fixed-point path.
    Nearest,
}

/// `(K, r1, r2)` with the derived interval `delta = (r2 - r1) / (K - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    levels: u64,
    lower: f64,
    upper: f64,
}

impl QuantizerSpec {
    pub fn new(levels: u64, lower: f64, upper: f64) -> Result<Self, QuantizeError> {
        if levels < 2 {
            return Err(QuantizeError::TooFewLevels(levels));
        }
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(QuantizeError::BadRange { lower, upper });
        }
        Ok(Self { levels, lower, upper })
    }

    /// `K` levels on the default range `[-1, 1]`.
    pub fn symmetric(levels: u64) -> Result<Self, QuantizeError> {
        Self::new(levels, -1.0, 1.0)
    }

    pub fn levels(&self) -> u64 {
        self.levels
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn interval(&self) -> f64 {
        (self.upper - self.lower) / (self.levels - 1) as f64
    }

    /// Grid point `T(l)`. The top level maps to `r2` exactly.
    pub fn grid_point(&self, level: u64) -> f64 {
        if level == self.levels - 1 {
            self.upper
        } else {
            self.lower + level as f64 * self.interval()
        }
    }

    fn prepare(&self, x: f64, policy: ClipPolicy) -> Result<f64, QuantizeError> {
        if !x.is_finite() {
            return Err(QuantizeError::NonFinite(x));
        }
        if x < self.lower || x > self.upper {
            if policy == ClipPolicy::Strict {
                return Err(QuantizeError::OutOfRange {
                    value: x,
                    lower: self.lower,
                    upper: self.upper,
                });
            }
            return Ok(x.clamp(self.lower, self.upper));
        }
        Ok(x)
    }

    /// Index `l` of the cell `[T(l), T(l+1))` containing `x`, robust to
    /// floating error at the grid points themselves.
    fn cell(&self, x: f64) -> u64 {
        let top = self.levels - 1;
        let guess = ((x - self.lower) / self.interval()).floor();
        let mut l = if guess <= 0.0 { 0 } else { (guess as u64).min(top) };
        while l > 0 && x < self.grid_point(l) {
            l -= 1;
        }
        while l < top && x >= self.grid_point(l + 1) {
            l += 1;
        }
        l
    }
}

/// Quantize one value to a level index in `[0, K - 1]`.
///
/// Returns `l + 1` with probability `(x - T(l)) / delta`, else `l`. Grid
/// points map to themselves without consuming randomness.
pub fn quantize<R: Rng + ?Sized>(x: f64, spec: &QuantizerSpec, rng: &mut R) -> Result<u64, QuantizeError> {
    quantize_with(x, spec, ClipPolicy::Clip, Rounding::Stochastic, rng)
}

pub fn quantize_with<R: Rng + ?Sized>(
    x: f64,
    spec: &QuantizerSpec,
    policy: ClipPolicy,
    rounding: Rounding,
    rng: &mut R,
) -> Result<u64, QuantizeError> {
    let x = spec.prepare(x, policy)?;
    let l = spec.cell(x);
    let low = spec.grid_point(l);
    if l == spec.levels - 1 || x == low {
        return Ok(l);
    }
    let high = spec.grid_point(l + 1);
    let frac = (x - low) / (high - low);
    let up = match rounding {
        Rounding::Stochastic => rng.random::<f64>() < frac,
        Rounding::Nearest => frac >= 0.5,
    };
    Ok(if up { l + 1 } else { l })
}

/// Real value of a level index, `r1 + l * delta`.
pub fn dequantize_level(level: u64, spec: &QuantizerSpec) -> Result<f64, QuantizeError> {
    if level >= spec.levels {
        return Err(QuantizeError::LevelOutOfRange {
            level,
            max: spec.levels - 1,
        });
    }
    Ok(spec.grid_point(level))
}

/// Map a decoded sum of `survivors` level indices back to reals:
/// `|U| r1 + v * delta`.
pub fn dequantize_aggregate(value: u64, survivors: usize, spec: &QuantizerSpec) -> Result<f64, QuantizeError> {
    let max = survivors as u64 * (spec.levels - 1);
    if value > max {
        return Err(QuantizeError::AggregateOverflow { value, max, survivors });
    }
    Ok(survivors as f64 * spec.lower + value as f64 * spec.interval())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn endpoints_are_deterministic() {
        let spec = QuantizerSpec::symmetric(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(quantize(-1.0, &spec, &mut rng).unwrap(), 0);
            assert_eq!(quantize(1.0, &spec, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn midpoint_frequency_matches_probability() {
        let spec = QuantizerSpec::symmetric(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 100_000;
        let ups = (0..trials)
            .filter(|_| quantize(0.5, &spec, &mut rng).unwrap() == 1)
            .count();
        let freq = ups as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.01, "{freq}");
    }

    #[test]
    fn dequantize_examples() {
        let k2 = QuantizerSpec::symmetric(2).unwrap();
        assert_eq!(dequantize_level(0, &k2).unwrap(), -1.0);
        assert_eq!(dequantize_level(1, &k2).unwrap(), 1.0);
        let k6 = QuantizerSpec::symmetric(6).unwrap();
        assert!((dequantize_level(2, &k6).unwrap() - (-0.2)).abs() < 1e-15);
        assert!(dequantize_level(6, &k6).is_err());

        assert_eq!(dequantize_aggregate(0, 3, &k2).unwrap(), -3.0);
        assert_eq!(dequantize_aggregate(3, 3, &k2).unwrap(), 3.0);
        assert_eq!(dequantize_aggregate(2, 3, &k2).unwrap(), 1.0);
        assert!(matches!(
            dequantize_aggregate(4, 3, &k2),
            Err(QuantizeError::AggregateOverflow { .. })
        ));
    }

    #[test]
    fn top_grid_point_is_exact() {
        for k in [2, 3, 6, 7, 10, 1 << 20] {
            let spec = QuantizerSpec::new(k, -0.3, 0.7).unwrap();
            assert_eq!(spec.grid_point(k - 1), 0.7);
        }
    }

    #[test]
    fn clipping_and_strict_mode() {
        let spec = QuantizerSpec::symmetric(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(quantize(7.0, &spec, &mut rng).unwrap(), 3);
        assert_eq!(quantize(-7.0, &spec, &mut rng).unwrap(), 0);
        assert!(matches!(
            quantize_with(7.0, &spec, ClipPolicy::Strict, Rounding::Stochastic, &mut rng),
            Err(QuantizeError::OutOfRange { .. })
        ));
        assert!(matches!(
            quantize(f64::NAN, &spec, &mut rng),
            Err(QuantizeError::NonFinite(_))
        ));
        assert!(QuantizerSpec::new(1, -1.0, 1.0).is_err());
        assert!(QuantizerSpec::new(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn nearest_rounding() {
        let spec = QuantizerSpec::symmetric(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = |x| quantize_with(x, &spec, ClipPolicy::Clip, Rounding::Nearest, &mut rng).unwrap();
        assert_eq!(q(-0.6), 0);
        assert_eq!(q(-0.4), 1);
        assert_eq!(q(0.51), 2);
    }

    proptest! {
        #[test]
        fn grid_points_round_trip(k in 2u64..200, lo in -5.0f64..0.0, width in 0.1f64..10.0, seed: u64) {
            let spec = QuantizerSpec::new(k, lo, lo + width).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in 0..k {
                let t = spec.grid_point(l);
                let q = quantize(t, &spec, &mut rng).unwrap();
                prop_assert_eq!(dequantize_level(q, &spec).unwrap(), t);
            }
        }

        #[test]
        fn output_is_a_neighbouring_level(x in -2.0f64..2.0, k in 2u64..64, seed: u64) {
            let spec = QuantizerSpec::symmetric(k).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = quantize(x, &spec, &mut rng).unwrap();
            let clipped = x.clamp(-1.0, 1.0);
            prop_assert!((spec.grid_point(q) - clipped).abs() <= spec.interval() * (1.0 + 1e-9));
        }

        #[test]
        fn aggregate_matches_sum_of_levels(levels in proptest::collection::vec(0u64..12, 1..20)) {
            let spec = QuantizerSpec::symmetric(12).unwrap();
            let direct: f64 = levels.iter().map(|&l| dequantize_level(l, &spec).unwrap()).sum();
            let total: u64 = levels.iter().sum();
            let agg = dequantize_aggregate(total, levels.len(), &spec).unwrap();
            prop_assert!((agg - direct).abs() < 1e-9);
        }
    }
}
