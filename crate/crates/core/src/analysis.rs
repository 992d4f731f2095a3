//! Closed-form evaluators: quantization-error bounds, privacy-leakage
//! probability, bandwidth expansion and mask-operation counts.

use serde::Serialize;
use thiserror::Error;

use crate::plan::CoalitionPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least one group")]
    NoGroups,

    #[error("expected {expected} quantizer levels, got {got}")]
    LevelCount { expected: usize, got: usize },

    #[error("quantizer levels must be at least 2 and strictly increasing: {0:?}")]
    BadLevels(Vec<u64>),

    #[error("range [{lower}, {upper}] is empty or not finite")]
    BadRange { lower: f64, upper: f64 },

    #[error("user count {users} does not equal {per_unit} users x {units} units")]
    UserCount {
        users: usize,
        per_unit: usize,
        units: usize,
    },

    #[error("group sizes differ: {0:?}; use the subgroup bound")]
    NonUniform(Vec<usize>),

    #[error("subgroup sizes differ: {0:?}")]
    RaggedSubgroups(Vec<usize>),

    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Parameters of the quantization-error bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBoundInput {
    /// `N`.
    pub users: usize,
    /// Users per group `n`, or per subgroup `n̄` with `subgroups`.
    pub group_size: usize,
    /// `L_g` per group; all ones for the plain layout.
    pub subgroups: Vec<usize>,
    /// `m`.
    pub model_len: usize,
    pub lower: f64,
    pub upper: f64,
    /// `K_0 < K_1 < ... < K_{G-1}`.
    pub levels: Vec<u64>,
}

impl ErrorBoundInput {
    /// `G` groups of `n` users.
    pub fn uniform(groups: usize, group_size: usize, model_len: usize, levels: Vec<u64>) -> Self {
        Self {
            users: groups * group_size,
            group_size,
            subgroups: vec![1; groups],
            model_len,
            lower: -1.0,
            upper: 1.0,
            levels,
        }
    }

    pub fn with_range(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        let groups = self.subgroups.len();
        if groups == 0 {
            return Err(AnalysisError::NoGroups);
        }
        if self.levels.len() != groups {
            return Err(AnalysisError::LevelCount {
                expected: groups,
                got: self.levels.len(),
            });
        }
        if self.levels[0] < 2 || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::BadLevels(self.levels.clone()));
        }
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(AnalysisError::BadRange {
                lower: self.lower,
                upper: self.upper,
            });
        }
        let units: usize = self.subgroups.iter().sum();
        if self.users != self.group_size * units {
            return Err(AnalysisError::UserCount {
                users: self.users,
                per_unit: self.group_size,
                units,
            });
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        let n = self.users as f64;
        (self.upper - self.lower).powi(2) / (4.0 * n * n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBound {
    pub value: f64,
    /// Segments quantized with each group's quantizer in one round,
    /// `(2 (G - g) - 1) n`.
    pub segments_per_quantizer: Vec<usize>,
}

fn inv_sq(k: u64) -> f64 {
    let d = (k - 1) as f64;
    1.0 / (d * d)
}

/// `sigma = ((r2 - r1)^2 / (4 N^2)) (m / G) n sum_g (2 (G - g) - 1) / (K_g - 1)^2`.
pub fn sigma_heterosag(input: &ErrorBoundInput) -> Result<ErrorBound, AnalysisError> {
    input.validate()?;
    if input.subgroups.iter().any(|&l| l != 1) {
        return Err(AnalysisError::NonUniform(input.subgroups.clone()));
    }
    let g_count = input.subgroups.len();
    let n = input.group_size;
    let counts: Vec<usize> = (0..g_count).map(|g| (2 * (g_count - g) - 1) * n).collect();
    let sum: f64 = (0..g_count)
        .map(|g| (2 * (g_count - g) - 1) as f64 * inv_sq(input.levels[g]))
        .sum();
    let value = input.scale() * (input.model_len as f64 / g_count as f64) * n as f64 * sum;
    Ok(ErrorBound {
        value,
        segments_per_quantizer: counts,
    })
}

/// The subgroup version:
/// `((r2 - r1)^2 / (4 N^2)) (m / Z) n̄ sum_g [sum_{j < L_g} (2 (Z - Z_{g-1} - j) - 1)] / (K_g - 1)^2`.
pub fn sigma_heterosag_plus(input: &ErrorBoundInput) -> Result<f64, AnalysisError> {
    input.validate()?;
    let z: usize = input.subgroups.iter().sum();
    let mut preceding = 0;
    let mut sum = 0.0;
    for (g, &l) in input.subgroups.iter().enumerate() {
        let segments: usize = (0..l).map(|j| 2 * (z - preceding - j) - 1).sum();
        sum += segments as f64 * inv_sq(input.levels[g]);
        preceding += l;
    }
    Ok(input.scale() * (input.model_len as f64 / z as f64) * input.group_size as f64 * sum)
}

/// Check that per-subgroup user counts agree before building an input.
pub fn common_subgroup_size(sizes: &[usize]) -> Result<usize, AnalysisError> {
    match sizes.first() {
        Some(&first) if sizes.iter().all(|&s| s == first) => Ok(first),
        _ => Err(AnalysisError::RaggedSubgroups(sizes.to_vec())),
    }
}

/// Probability that exactly one user of a subgroup of `n̄` survives when
/// each drops independently with probability `p`: `n̄ (1 - p) p^(n̄ - 1)`.
pub fn privacy_leakage_prob(subgroup_size: usize, p: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AnalysisError::BadProbability(p));
    }
    let n = subgroup_size as f64;
    Ok(n * (1.0 - p) * p.powi(subgroup_size as i32 - 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bandwidth {
    pub ratio: f64,
    /// `ceil(log2(|S| (K - 1) + 1))`.
    pub masked_bits: u32,
    /// `ceil(log2 K)`.
    pub plain_bits: u32,
}

fn ceil_log2(v: u64) -> u32 {
    if v <= 1 {
        0
    } else {
        u64::BITS - (v - 1).leading_zeros()
    }
}

/// Bits per masked element over bits per quantized element.
pub fn bandwidth_expansion(coalition_size: usize, levels: u64) -> Bandwidth {
    let masked = ceil_log2(coalition_size as u64 * (levels - 1) + 1);
    let plain = ceil_log2(levels);
    Bandwidth {
        ratio: masked as f64 / plain as f64,
        masked_bits: masked,
        plain_bits: plain,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskCounts {
    /// Pairwise masks added to each element, per column and level.
    pub pairwise_per_element: Vec<Vec<usize>>,
    /// PRG symbols one user of each column expands per round, pairwise and
    /// private masks together. Each is also one modular addition.
    pub prg_symbols_per_user: Vec<u64>,
}

impl MaskCounts {
    pub fn max_pairwise_per_element(&self) -> usize {
        self.pairwise_per_element.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// Count masking work for a plan with `subgroup_size` users per column and
/// model length `m`.
pub fn count_mask_operations(plan: &CoalitionPlan, subgroup_size: usize, model_len: usize) -> MaskCounts {
    let columns = plan.columns().len();
    let seg_len = model_len.div_ceil(plan.level_count()) as u64;
    let mut per_element = vec![Vec::with_capacity(plan.level_count()); columns];
    let mut symbols = vec![0u64; columns];
    for level in 0..plan.level_count() {
        for col in 0..columns {
            let c = &plan.level(level)[plan.coalition_of(level, col)];
            let masks = c.columns.len() * subgroup_size - 1;
            per_element[col].push(masks);
            symbols[col] += seg_len * (masks as u64 + 1);
        }
    }
    MaskCounts {
        pairwise_per_element: per_element,
        prg_symbols_per_user: symbols,
    }
}

/// One side of the comparison with plain secure aggregation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub name: &'static str,
    pub error_bound: f64,
    /// Expansion at the level a user spends alone with its own group, and at
    /// a paired level (the latter equals the former for the plain scheme).
    pub bandwidth_single: Bandwidth,
    pub bandwidth_paired: Bandwidth,
    pub max_masks_per_element: usize,
    pub leakage_prob: f64,
    pub inference_robustness: f64,
}

/// Plain secure aggregation (everyone quantizes with `K_0` and masks with
/// everyone) against the segmented scheme, for a uniform layout.
pub fn compare_with_secure_aggregation(
    input: &ErrorBoundInput,
    plan: &CoalitionPlan,
    dropout: f64,
) -> Result<[SchemeSummary; 2], AnalysisError> {
    let ours = sigma_heterosag_plus(input)?;
    let n = input.users;
    let k0 = input.levels[0];
    let baseline_input = ErrorBoundInput {
        users: n,
        group_size: n,
        subgroups: vec![1],
        model_len: input.model_len,
        lower: input.lower,
        upper: input.upper,
        levels: vec![k0],
    };
    let baseline = sigma_heterosag(&baseline_input)?.value;
    let counts = count_mask_operations(plan, input.group_size, input.model_len);
    let z = plan.columns().len();
    let robustness = crate::plan::inference_robustness_closed_form(z);
    Ok([
        SchemeSummary {
            name: "SecAg",
            error_bound: baseline,
            bandwidth_single: bandwidth_expansion(n, k0),
            bandwidth_paired: bandwidth_expansion(n, k0),
            max_masks_per_element: n - 1,
            leakage_prob: 0.0,
            inference_robustness: 1.0,
        },
        SchemeSummary {
            name: "HeteroSAg",
            error_bound: ours,
            bandwidth_single: bandwidth_expansion(input.group_size, k0),
            bandwidth_paired: bandwidth_expansion(2 * input.group_size, k0),
            max_masks_per_element: counts.max_pairwise_per_element(),
            leakage_prob: privacy_leakage_prob(input.group_size, dropout)?,
            inference_robustness: robustness,
        },
    ])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::plan::{build_ss_matrix, build_ss_matrix_hetero};
    use crate::quantize::{quantize, QuantizerSpec};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn leakage_examples() {
        let p = privacy_leakage_prob(8, 0.1).unwrap();
        assert!(rel(p, 7.2e-7) < 1e-12, "{p}");
        assert_eq!(privacy_leakage_prob(4, 0.0).unwrap(), 0.0);
        assert_eq!(privacy_leakage_prob(1, 0.0).unwrap(), 1.0);
        assert!(privacy_leakage_prob(4, 1.5).is_err());
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(bandwidth_expansion(1024, 2).ratio, 11.0);
        assert_eq!(bandwidth_expansion(8, 2).ratio, 4.0);
        assert_eq!(bandwidth_expansion(1024, 1 << 16).ratio, 1.625);
        // 8 * 65535 + 1 = 524281 < 2^19, so the masked symbol needs 19 bits.
        let b = bandwidth_expansion(8, 1 << 16);
        assert_eq!((b.ratio, b.masked_bits, b.plain_bits), (19.0 / 16.0, 19, 16));
        assert_eq!(bandwidth_expansion(16, 2).masked_bits, 5);
    }

    #[test]
    fn single_group_reduces_to_plain_bound() {
        let input = ErrorBoundInput::uniform(1, 10, 50, vec![5]);
        let want = 4.0 / (4.0 * 100.0) * 50.0 * 10.0 / 16.0;
        assert!(rel(sigma_heterosag(&input).unwrap().value, want) < 1e-15);
    }

    #[test]
    fn bound_vanishes_with_fine_quantizers() {
        let coarse = sigma_heterosag(&ErrorBoundInput::uniform(3, 2, 30, vec![2, 3, 4])).unwrap();
        let fine = sigma_heterosag(&ErrorBoundInput::uniform(
            3,
            2,
            30,
            vec![1 << 30, (1 << 30) + 1, (1 << 30) + 2],
        ))
        .unwrap();
        assert!(fine.value < coarse.value * 1e-15);
    }

    #[test]
    fn segment_counts_per_quantizer() {
        let b = sigma_heterosag(&ErrorBoundInput::uniform(5, 5, 100, vec![2, 6, 8, 10, 12])).unwrap();
        assert_eq!(b.segments_per_quantizer, vec![45, 35, 25, 15, 5]);
        // Cross-check against the plan: how many (user, level) slots use each quantizer.
        let plan = build_ss_matrix(5).unwrap().coalition_plan();
        let mut counted = vec![0; 5];
        for level in plan.levels() {
            for c in level {
                counted[c.quantizer] += c.columns.len() * 5;
            }
        }
        assert_eq!(counted, b.segments_per_quantizer);
    }

    #[test]
    fn subgroup_bound_reduces_and_is_invariant() {
        for g in 2..=6 {
            let levels: Vec<u64> = (0..g as u64).map(|i| 2 + 3 * i).collect();
            let base = ErrorBoundInput::uniform(g, 12, 120, levels.clone());
            let sigma = sigma_heterosag(&base).unwrap().value;
            for l in 1..=4 {
                let split = ErrorBoundInput {
                    users: 12 * g,
                    group_size: 12 / l,
                    subgroups: vec![l; g],
                    ..base.clone()
                };
                if 12 % l != 0 {
                    continue;
                }
                let plus = sigma_heterosag_plus(&split).unwrap();
                assert!(rel(plus, sigma) < 1e-12, "G={g} L={l}: {plus} vs {sigma}");
            }
        }
    }

    #[test]
    fn input_validation() {
        let mut bad = ErrorBoundInput::uniform(2, 2, 4, vec![4, 4]);
        assert!(matches!(sigma_heterosag(&bad), Err(AnalysisError::BadLevels(_))));
        bad.levels = vec![2, 4];
        bad.users = 5;
        assert!(matches!(sigma_heterosag(&bad), Err(AnalysisError::UserCount { .. })));
        let hetero = ErrorBoundInput {
            users: 6,
            group_size: 2,
            subgroups: vec![1, 2],
            model_len: 6,
            lower: -1.0,
            upper: 1.0,
            levels: vec![2, 4],
        };
        assert!(matches!(sigma_heterosag(&hetero), Err(AnalysisError::NonUniform(_))));
        assert!(sigma_heterosag_plus(&hetero).is_ok());
        assert_eq!(common_subgroup_size(&[3, 3, 3]), Ok(3));
        assert!(common_subgroup_size(&[3, 2]).is_err());
    }

    /// Monte-Carlo estimate of E||p̄ - p||^2 where p is the average update and
    /// p̄ the average of quantized updates, each segment using the quantizer
    /// its coalition is assigned.
    fn monte_carlo_error(input: &ErrorBoundInput, draws: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = build_ss_matrix_hetero(&input.subgroups).unwrap();
        let plan = matrix.coalition_plan();
        let z = matrix.dim();
        let seg = input.model_len / z;
        let n = input.users;
        let specs: Vec<QuantizerSpec> = input
            .levels
            .iter()
            .map(|&k| QuantizerSpec::new(k, input.lower, input.upper).unwrap())
            .collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..input.model_len)
                    .map(|_| rng.random_range(input.lower..input.upper))
                    .collect()
            })
            .collect();
        let mut total = 0.0;
        for _ in 0..draws {
            let mut diff = vec![0.0; input.model_len];
            for (u, xu) in x.iter().enumerate() {
                let col = u / input.group_size;
                for (i, &v) in xu.iter().enumerate() {
                    let level = i / seg;
                    let spec = &specs[plan.level(level)[plan.coalition_of(level, col)].quantizer];
                    let q = spec.grid_point(quantize(v, spec, &mut rng).unwrap());
                    diff[i] += (q - v) / n as f64;
                }
            }
            total += diff.iter().map(|d| d * d).sum::<f64>();
        }
        total / draws as f64
    }

    #[test]
    fn monte_carlo_stays_below_bounds() {
        let input = ErrorBoundInput::uniform(5, 5, 100, vec![2, 6, 8, 10, 12]);
        let bound = sigma_heterosag(&input).unwrap().value;
        let mc = monte_carlo_error(&input, 2_000, 1);
        assert!(mc <= bound, "{mc} > {bound}");

        let hetero = ErrorBoundInput {
            users: 10,
            group_size: 2,
            subgroups: vec![1, 2, 2],
            model_len: 50,
            lower: -1.0,
            upper: 1.0,
            levels: vec![2, 5, 9],
        };
        let bound = sigma_heterosag_plus(&hetero).unwrap();
        let mc = monte_carlo_error(&hetero, 2_000, 2);
        assert!(mc <= bound, "{mc} > {bound}");
    }

    #[test]
    fn mask_counts_follow_coalition_sizes() {
        let plan = build_ss_matrix(5).unwrap().coalition_plan();
        let counts = count_mask_operations(&plan, 4, 20);
        // Group 0: paired on levels 0..=3, alone on level 4.
        assert_eq!(counts.pairwise_per_element[0], vec![7, 7, 7, 7, 3]);
        assert_eq!(counts.prg_symbols_per_user[0], 4 * (8 * 4 + 4));
        let secag = CoalitionPlan::single_coalition(plan.columns().to_vec());
        let flat = count_mask_operations(&secag, 4, 20);
        assert!(flat.pairwise_per_element.iter().all(|v| v == &vec![19]));
    }

    #[test]
    fn comparison_rows() {
        let input = ErrorBoundInput::uniform(5, 8, 100, vec![2, 6, 8, 10, 12]);
        let plan = build_ss_matrix(5).unwrap().coalition_plan();
        let [secag, ours] = compare_with_secure_aggregation(&input, &plan, 0.1).unwrap();
        assert_eq!(secag.bandwidth_single.masked_bits, 6);
        assert_eq!(ours.bandwidth_single.ratio, 4.0);
        assert_eq!(ours.bandwidth_paired.ratio, 5.0);
        assert_eq!(ours.max_masks_per_element, 15);
        assert!(rel(ours.leakage_prob, 7.2e-7) < 1e-12);
        assert!(ours.error_bound < secag.error_bound);
    }
}
