//! Coordinate-wise median over the decoded coalition segments of each level,
//! and the three model-poisoning attacks it is meant to absorb.
//!
//! A Byzantine user only contaminates the coalitions it belongs to: one per
//! level. As long as more than half the coalition averages at every level are
//! clean, each median coordinate stays inside the clean values' range.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::CoalitionPlan;
use crate::protocol::{ProtocolError, RoundOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ByzantineError {
    #[error("median of an empty set of segments")]
    Empty,

    #[error("segment {index} has length {got}, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, got: usize },

    #[error("unknown attack '{0}' (expected none, gaussian, sign_flip or label_flip)")]
    UnknownAttack(String),

    #[error("attack parameter {name} = {value} must be finite")]
    BadParameter { name: &'static str, value: f64 },

    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Largest tolerated number of Byzantine users, `ceil(G / 4) - 1`.
pub fn max_byzantine(group_count: usize) -> usize {
    group_count.div_ceil(4).saturating_sub(1)
}

/// Element-wise median; with an even count, the mean of the middle two.
pub fn coordinate_median(segments: &[Vec<f64>]) -> Result<Vec<f64>, ByzantineError> {
    let first = segments.first().ok_or(ByzantineError::Empty)?;
    let len = first.len();
    if let Some((index, s)) = segments.iter().enumerate().find(|(_, s)| s.len() != len) {
        return Err(ByzantineError::LengthMismatch {
            index,
            expected: len,
            got: s.len(),
        });
    }
    let mut column = Vec::with_capacity(segments.len());
    Ok((0..len)
        .map(|k| {
            column.clear();
            column.extend(segments.iter().map(|s| s[k]));
            column.sort_by(f64::total_cmp);
            let mid = column.len() / 2;
            if column.len() % 2 == 1 {
                column[mid]
            } else {
                (column[mid - 1] + column[mid]) / 2.0
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// Replace every entry with a draw from `N(0, sigma^2)`.
    Gaussian {
        sigma: f64,
    },
    /// Scale the update by `multiplier` (negative).
    SignFlip {
        multiplier: f64,
    },
    /// Train on labels `|y - shift|`, then scale the update by `multiplier`.
    LabelFlip {
        shift: f64,
        multiplier: f64,
    },
}

impl AttackKind {
    pub const GAUSSIAN: AttackKind = AttackKind::Gaussian { sigma: 5.0 };
    pub const SIGN_FLIP: AttackKind = AttackKind::SignFlip { multiplier: -5.0 };
    /// Shift 1 flips binary labels; the digit experiments used 9.
    pub const LABEL_FLIP: AttackKind = AttackKind::LabelFlip {
        shift: 1.0,
        multiplier: 30.0,
    };

    pub fn validate(&self) -> Result<(), ByzantineError> {
        let check = |name, value: f64| {
            if value.is_finite() {
                Ok(())
            } else {
                Err(ByzantineError::BadParameter { name, value })
            }
        };
        match *self {
            AttackKind::None => Ok(()),
            AttackKind::Gaussian { sigma } => check("sigma", sigma),
            AttackKind::SignFlip { multiplier } => check("multiplier", multiplier),
            AttackKind::LabelFlip { shift, multiplier } => {
                check("shift", shift)?;
                check("multiplier", multiplier)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Gaussian { .. } => "gaussian",
            AttackKind::SignFlip { .. } => "sign_flip",
            AttackKind::LabelFlip { .. } => "label_flip",
        }
    }
}

/// Parses the attack name with default parameters.
impl FromStr for AttackKind {
    type Err = ByzantineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(AttackKind::None),
            "gaussian" => Ok(AttackKind::GAUSSIAN),
            "sign_flip" => Ok(AttackKind::SIGN_FLIP),
            "label_flip" => Ok(AttackKind::LABEL_FLIP),
            _ => Err(ByzantineError::UnknownAttack(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub byzantine: BTreeSet<usize>,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            byzantine: BTreeSet::new(),
        }
    }

    pub fn is_byzantine(&self, user: usize) -> bool {
        !matches!(self.kind, AttackKind::None) && self.byzantine.contains(&user)
    }
}

/// Label seen by a label-flipping user.
pub fn flip_label(label: f64, shift: f64) -> f64 {
    (label - shift).abs()
}

/// Corrupt a Byzantine user's update. For label flipping the update is
/// assumed to come from flipped labels already; only the scaling is applied.
pub fn inject_attack<R: Rng + ?Sized>(
    update: &[f64],
    kind: &AttackKind,
    rng: &mut R,
) -> Result<Vec<f64>, ByzantineError> {
    kind.validate()?;
    Ok(match *kind {
        AttackKind::None => update.to_vec(),
        AttackKind::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma.abs()).map_err(|_| ByzantineError::BadParameter {
                name: "sigma",
                value: sigma,
            })?;
            update.iter().map(|_| normal.sample(rng)).collect()
        }
        AttackKind::SignFlip { multiplier } | AttackKind::LabelFlip { multiplier, .. } => {
            update.iter().map(|v| v * multiplier).collect()
        }
    })
}

/// Robust estimate of the average update: per level, the coordinate median
/// of the decoded coalition averages; levels concatenated, padding removed.
pub fn median_aggregate(outcome: &RoundOutcome) -> Result<Vec<f64>, ByzantineError> {
    let mut out = Vec::with_capacity(outcome.levels * outcome.segment_len);
    for level in 0..outcome.levels {
        let averages = outcome.level_averages(level)?;
        if averages.is_empty() {
            return Err(ProtocolError::IncompleteRound { level }.into());
        }
        out.extend(coordinate_median(&averages)?);
    }
    out.truncate(outcome.model_len);
    Ok(out)
}

/// `(level, coalition)` pairs touched by users in the given columns.
pub fn contaminated_coalitions(plan: &CoalitionPlan, columns: &BTreeSet<usize>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (level, coalitions) in plan.levels().iter().enumerate() {
        for (index, c) in coalitions.iter().enumerate() {
            if c.columns.iter().any(|col| columns.contains(col)) {
                out.push((level, index));
            }
        }
    }
    out
}
