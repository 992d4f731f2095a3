//! One secure-aggregation round on the segment level.
//!
//! Users are laid out column by column: with `n̄` users per subgroup, user
//! `u` sits in column `u / n̄`. Every model update is cut into one segment
//! per plan level; at each level a user masks its quantized segment together
//! with the other members of its coalition, in the ring `Z_R` with
//! `R = |S| (K - 1) + 1`. The server sums each coalition, strips the private
//! masks of survivors and the pairwise masks shared with dropped users (both
//! rebuilt from Shamir shares), and gets the clear coalition sum.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::crypto::{
    derive_pairwise_seed, prg_expand, shamir_reconstruct, shamir_share, CryptoError, GroupParams, KeyPair, PrimeField,
    PublicKey, RingModulus, SecretKey, SecretShare, Seed,
};
use crate::plan::{build_ss_matrix_hetero, CoalitionPlan, ColumnId, PlanError};
use crate::quantize::{dequantize_aggregate, quantize_with, ClipPolicy, QuantizeError, QuantizerSpec, Rounding};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("topology needs at least one group")]
    EmptyTopology,

    #[error("group {0} has no subgroups")]
    NoSubgroups(usize),

    #[error("subgroup size must be at least 1")]
    EmptySubgroup,

    #[error("expected {expected} quantizers (one per group), got {got}")]
    QuantizerCount { expected: usize, got: usize },

    #[error("model length must be at least 1")]
    EmptyModel,

    #[error("threshold {threshold} is infeasible for {users} users")]
    InvalidThreshold { threshold: usize, users: usize },

    #[error("plan columns do not match the topology")]
    PlanMismatch,

    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("user {user} sent level {level} under modulus {got}, expected {expected}")]
    ModulusMismatch {
        user: usize,
        level: usize,
        expected: u64,
        got: u64,
    },

    #[error("no segment from surviving user {user} at level {level}")]
    MissingSegment { user: usize, level: usize },

    #[error("only {survivors} users survived; reconstruction needs {threshold}")]
    TooFewSurvivors { survivors: usize, threshold: usize },

    #[error("asked for both the private-seed and the key share of user {owner}")]
    BothSharesRequested { owner: usize },

    #[error("reconstructed key of user {user} does not match its public key")]
    KeyMismatch { user: usize },

    #[error("level {level} has no decodable coalition")]
    IncompleteRound { level: usize },

    #[error("transcript line {line}: {reason}")]
    Transcript { line: usize, reason: String },

    #[error(transparent)]
    Crypto(#[from] CryptoError),

    #[error(transparent)]
    Quantize(#[from] QuantizeError),

    #[error(transparent)]
    Plan(#[from] PlanError),
}

impl ProtocolError {
    /// True for errors caused by an inconsistent configuration rather than
    /// by a failure while running the protocol.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ProtocolError::EmptyTopology
                | ProtocolError::NoSubgroups(_)
                | ProtocolError::EmptySubgroup
                | ProtocolError::QuantizerCount { .. }
                | ProtocolError::EmptyModel
                | ProtocolError::InvalidThreshold { .. }
                | ProtocolError::PlanMismatch
                | ProtocolError::Plan(_)
        )
    }
}

/// Groups split into `subgroups[g]` subgroups of `subgroup_size` users each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    subgroups: Vec<usize>,
    subgroup_size: usize,
}

impl Topology {
    pub fn new(subgroups: Vec<usize>, subgroup_size: usize) -> Result<Self, ProtocolError> {
        if subgroups.is_empty() {
            return Err(ProtocolError::EmptyTopology);
        }
        if let Some(g) = subgroups.iter().position(|&l| l == 0) {
            return Err(ProtocolError::NoSubgroups(g));
        }
        if subgroup_size == 0 {
            return Err(ProtocolError::EmptySubgroup);
        }
        Ok(Self {
            subgroups,
            subgroup_size,
        })
    }

    /// `groups` groups of `group_size` users, no subgrouping.
    pub fn uniform(groups: usize, group_size: usize) -> Result<Self, ProtocolError> {
        Self::new(vec![1; groups], group_size)
    }

    pub fn subgroups(&self) -> &[usize] {
        &self.subgroups
    }

    pub fn subgroup_size(&self) -> usize {
        self.subgroup_size
    }

    pub fn group_count(&self) -> usize {
        self.subgroups.len()
    }

    /// `Z`, the number of columns.
    pub fn column_count(&self) -> usize {
        self.subgroups.iter().sum()
    }

    /// `N = Z n̄`.
    pub fn user_count(&self) -> usize {
        self.column_count() * self.subgroup_size
    }

    pub fn column_of(&self, user: usize) -> usize {
        user / self.subgroup_size
    }

    pub fn column_id(&self, column: usize) -> ColumnId {
        let mut rest = column;
        for (group, &count) in self.subgroups.iter().enumerate() {
            if rest < count {
                return ColumnId { group, subgroup: rest };
            }
            rest -= count;
        }
        panic!("column {column} out of range")
    }

    pub fn group_of(&self, user: usize) -> usize {
        self.column_id(self.column_of(user)).group
    }

    pub fn members(&self, column: usize) -> Range<usize> {
        column * self.subgroup_size..(column + 1) * self.subgroup_size
    }

    pub fn columns(&self) -> Vec<ColumnId> {
        (0..self.column_count()).map(|c| self.column_id(c)).collect()
    }

    /// Coalition plan from the segment-selection matrix of this layout.
    pub fn plan(&self) -> Result<CoalitionPlan, PlanError> {
        Ok(build_ss_matrix_hetero(&self.subgroups)?.coalition_plan())
    }
}

/// `ceil(N / 2) + 1`, capped at `N`.
pub fn default_threshold(users: usize) -> usize {
    (users.div_ceil(2) + 1).min(users)
}

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub topology: Topology,
    /// One quantizer per group; a coalition uses its lowest group's.
    pub quantizers: Vec<QuantizerSpec>,
    /// `m`, the length of every model update.
    pub model_len: usize,
    /// Shamir threshold; `None` means `default_threshold(N)`.
    pub threshold: Option<usize>,
    pub clip: ClipPolicy,
    pub rounding: Rounding,
    pub key_group: GroupParams,
    pub share_field: PrimeField,
}

impl ProtocolConfig {
    pub fn new(topology: Topology, quantizers: Vec<QuantizerSpec>, model_len: usize) -> Result<Self, ProtocolError> {
        let config = Self {
            topology,
            quantizers,
            model_len,
            threshold: None,
            clip: ClipPolicy::Clip,
            rounding: Rounding::Stochastic,
            key_group: GroupParams::TOY_61,
            share_field: PrimeField::MERSENNE_61,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_threshold(mut self, threshold: usize) -> Result<Self, ProtocolError> {
        self.threshold = Some(threshold);
        self.validate()?;
        Ok(self)
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn threshold(&self) -> usize {
        self.threshold
            .unwrap_or_else(|| default_threshold(self.topology.user_count()))
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let groups = self.topology.group_count();
        if self.quantizers.len() != groups {
            return Err(ProtocolError::QuantizerCount {
                expected: groups,
                got: self.quantizers.len(),
            });
        }
        if self.model_len == 0 {
            return Err(ProtocolError::EmptyModel);
        }
        let users = self.topology.user_count();
        let threshold = self.threshold();
        if threshold == 0 || threshold > users {
            return Err(ProtocolError::InvalidThreshold { threshold, users });
        }
        Ok(())
    }

    /// Segment length `ceil(m / levels)`; the last segment is zero-padded.
    pub fn segment_len(&self, plan: &CoalitionPlan) -> usize {
        self.model_len.div_ceil(plan.level_count())
    }

    fn check_plan(&self, plan: &CoalitionPlan) -> Result<(), ProtocolError> {
        if plan.columns() != self.topology.columns().as_slice() {
            return Err(ProtocolError::PlanMismatch);
        }
        Ok(())
    }

    /// Quantizer and modulus of coalition `coalition` at `level`.
    pub fn coalition_ring(
        &self,
        plan: &CoalitionPlan,
        level: usize,
        coalition: usize,
    ) -> Result<(&QuantizerSpec, RingModulus), ProtocolError> {
        let c = &plan.level(level)[coalition];
        let spec = &self.quantizers[c.quantizer];
        let size = c.columns.len() * self.topology.subgroup_size();
        Ok((spec, RingModulus::for_coalition(size, spec.levels())?))
    }

    fn coalition_members(&self, plan: &CoalitionPlan, level: usize, coalition: usize) -> Vec<usize> {
        plan.level(level)[coalition]
            .columns
            .iter()
            .flat_map(|&c| self.topology.members(c))
            .collect()
    }
}

/// Bits one user in `column` uploads per round: `sum_l seg_len * ceil(log2 R_l)`.
pub fn upload_bits(config: &ProtocolConfig, plan: &CoalitionPlan, column: usize) -> Result<u64, ProtocolError> {
    let seg_len = config.segment_len(plan) as u64;
    let mut bits = 0;
    for level in 0..plan.level_count() {
        let (_, r) = config.coalition_ring(plan, level, plan.coalition_of(level, column))?;
        bits += seg_len * u64::from(r.bits());
    }
    Ok(bits)
}

/// Shares of one owner's secrets held by one other user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeldShares {
    pub private_seed: SecretShare,
    pub secret_key: SecretShare,
}

/// Everything the server may see: public keys and the round parameters.
#[derive(Clone, Debug)]
pub struct PublicBoard {
    pub round: u64,
    pub threshold: usize,
    pub public_keys: Vec<PublicKey>,
}

#[derive(Clone, Debug)]
pub struct UserState {
    pub id: usize,
    pub column: usize,
    pub column_id: ColumnId,
    pub round: u64,
    pub keys: KeyPair,
    /// `b_i`, the private mask seed.
    pub private_seed: Seed,
    /// `s_ij` for every other user `j`.
    pub pairwise: BTreeMap<usize, Seed>,
    /// Shares of this user's secrets, indexed by holder.
    pub outgoing: Vec<HeldShares>,
    /// Shares of other users' secrets held here, keyed by owner.
    pub incoming: BTreeMap<usize, HeldShares>,
}

/// Which users the server treats as survivors and which as dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UnmaskRequest {
    pub survivors: BTreeSet<usize>,
    pub dropped: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskResponse {
    pub from: usize,
    pub private_seed_shares: Vec<SecretShare>,
    pub secret_key_shares: Vec<SecretShare>,
}

impl UserState {
    /// Reveal `b` shares of survivors and key shares of dropped users. A user
    /// never reveals both kinds for the same owner: that would let the server
    /// strip every mask from a merely delayed user.
    pub fn respond(&self, request: &UnmaskRequest) -> Result<UnmaskResponse, ProtocolError> {
        if let Some(&owner) = request.survivors.intersection(&request.dropped).next() {
            return Err(ProtocolError::BothSharesRequested { owner });
        }
        let held = |owner: usize| {
            if owner == self.id {
                self.outgoing.get(self.id).copied()
            } else {
                self.incoming.get(&owner).copied()
            }
        };
        Ok(UnmaskResponse {
            from: self.id,
            private_seed_shares: request
                .survivors
                .iter()
                .filter_map(|&o| held(o).map(|h| h.private_seed))
                .collect(),
            secret_key_shares: request
                .dropped
                .iter()
                .filter_map(|&o| held(o).map(|h| h.secret_key))
                .collect(),
        })
    }
}

/// Key agreement and secret sharing for one round.
pub fn setup_round<R: Rng + ?Sized>(
    config: &ProtocolConfig,
    round: u64,
    rng: &mut R,
) -> Result<(PublicBoard, Vec<UserState>), ProtocolError> {
    config.validate()?;
    let topology = &config.topology;
    let n = topology.user_count();
    let threshold = config.threshold();
    let field = config.share_field;

    let keys: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(config.key_group, rng)).collect();
    let private_seeds: Vec<Seed> = (0..n).map(|_| Seed(rng.random_range(0..field.modulus()))).collect();

    // shares[owner][holder]
    let mut shares = Vec::with_capacity(n);
    for owner in 0..n {
        let b = shamir_share(field, private_seeds[owner].0, threshold, n, owner, rng)?;
        let sk = shamir_share(field, keys[owner].secret.exponent(), threshold, n, owner, rng)?;
        shares.push(
            b.into_iter()
                .zip(sk)
                .map(|(private_seed, secret_key)| HeldShares {
                    private_seed,
                    secret_key,
                })
                .collect::<Vec<_>>(),
        );
    }

    let mut users = Vec::with_capacity(n);
    for id in 0..n {
        let mut pairwise = BTreeMap::new();
        for (j, other) in keys.iter().enumerate() {
            if j != id {
                pairwise.insert(j, derive_pairwise_seed(&keys[id].secret, &other.public)?);
            }
        }
        let incoming = (0..n)
            .filter(|&owner| owner != id)
            .map(|owner| (owner, shares[owner][id]))
            .collect();
        let column = topology.column_of(id);
        users.push(UserState {
            id,
            column,
            column_id: topology.column_id(column),
            round,
            keys: keys[id],
            private_seed: private_seeds[id],
            pairwise,
            outgoing: shares[id].clone(),
            incoming,
        });
    }

    let board = PublicBoard {
        round,
        threshold,
        public_keys: keys.iter().map(|k| k.public).collect(),
    };
    Ok((board, users))
}

/// One user's masked segment at one level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSegment {
    pub user: usize,
    pub level: usize,
    /// Index of the coalition within its level.
    pub coalition: usize,
    pub modulus: RingModulus,
    pub payload: Vec<u64>,
}

impl MaskedSegment {
    pub fn bits(&self) -> u64 {
        self.payload.len() as u64 * u64::from(self.modulus.bits())
    }
}

/// `y = x + b + sum(added) - sum(subtracted) mod R` for one element.
pub fn mask_symbol(
    level: u64,
    private: u64,
    added: impl IntoIterator<Item = u64>,
    subtracted: impl IntoIterator<Item = u64>,
    modulus: RingModulus,
) -> u64 {
    let mut y = modulus.add(level, private);
    for a in added {
        y = modulus.add(y, a);
    }
    for s in subtracted {
        y = modulus.sub(y, s);
    }
    y
}

/// Quantize each segment of `update` with the quantizer of the user's
/// coalition at that level, returning level indices per segment.
pub fn quantize_segments<R: Rng + ?Sized>(
    config: &ProtocolConfig,
    plan: &CoalitionPlan,
    column: usize,
    update: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<u64>>, ProtocolError> {
    config.check_plan(plan)?;
    if update.len() != config.model_len {
        return Err(ProtocolError::ShapeMismatch {
            what: "model length",
            expected: config.model_len,
            got: update.len(),
        });
    }
    let seg_len = config.segment_len(plan);
    (0..plan.level_count())
        .map(|level| {
            let coalition = plan.coalition_of(level, column);
            let (spec, _) = config.coalition_ring(plan, level, coalition)?;
            (0..seg_len)
                .map(|k| {
                    let x = update.get(level * seg_len + k).copied().unwrap_or(0.0);
                    Ok(quantize_with(x, spec, config.clip, config.rounding, rng)?)
                })
                .collect()
        })
        .collect()
}

/// Mask already-quantized segments.
pub fn mask_segments(
    user: &UserState,
    config: &ProtocolConfig,
    plan: &CoalitionPlan,
    quantized: &[Vec<u64>],
) -> Result<Vec<MaskedSegment>, ProtocolError> {
    config.check_plan(plan)?;
    let seg_len = config.segment_len(plan);
    if quantized.len() != plan.level_count() {
        return Err(ProtocolError::ShapeMismatch {
            what: "segment count",
            expected: plan.level_count(),
            got: quantized.len(),
        });
    }
    let mut out = Vec::with_capacity(quantized.len());
    for (level, levels) in quantized.iter().enumerate() {
        if levels.len() != seg_len {
            return Err(ProtocolError::ShapeMismatch {
                what: "segment length",
                expected: seg_len,
                got: levels.len(),
            });
        }
        let coalition = plan.coalition_of(level, user.column);
        let (_, r) = config.coalition_ring(plan, level, coalition)?;
        let stream = |seed: Seed| prg_expand(seed.for_level(user.round, level), seg_len, r);

        let private = stream(user.private_seed)?;
        let mut added = Vec::new();
        let mut subtracted = Vec::new();
        for j in config.coalition_members(plan, level, coalition) {
            if j == user.id {
                continue;
            }
            let s = stream(user.pairwise[&j])?;
            if user.id < j {
                added.push(s);
            } else {
                subtracted.push(s);
            }
        }
        let payload = (0..seg_len)
            .map(|k| {
                mask_symbol(
                    levels[k],
                    private[k],
                    added.iter().map(|s| s[k]),
                    subtracted.iter().map(|s| s[k]),
                    r,
                )
            })
            .collect();
        out.push(MaskedSegment {
            user: user.id,
            level,
            coalition,
            modulus: r,
            payload,
        });
    }
    Ok(out)
}

/// Quantize and mask one user's update: one segment per plan level.
pub fn encode_segments<R: Rng + ?Sized>(
    user: &UserState,
    update: &[f64],
    plan: &CoalitionPlan,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<Vec<MaskedSegment>, ProtocolError> {
    let quantized = quantize_segments(config, plan, user.column, update, rng)?;
    mask_segments(user, config, plan, &quantized)
}

/// Decoded result of one coalition at one level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoalitionOutcome {
    pub level: usize,
    pub coalition: usize,
    /// Group index of the quantizer used.
    pub quantizer: usize,
    pub modulus: RingModulus,
    pub members: Vec<usize>,
    pub survivors: Vec<usize>,
    /// Sum of survivors' level indices; `None` when nobody survived.
    pub sum: Option<Vec<u64>>,
}

impl CoalitionOutcome {
    /// A single survivor's segment is decoded in the clear.
    pub fn leaks(&self) -> bool {
        self.survivors.len() == 1
    }
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: u64,
    pub model_len: usize,
    pub segment_len: usize,
    pub levels: usize,
    pub coalitions: Vec<CoalitionOutcome>,
    pub survivors: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Bits received from each user this round, indexed by user.
    pub bits_per_user: Vec<u64>,
    quantizers: Vec<QuantizerSpec>,
}

impl RoundOutcome {
    pub fn level(&self, level: usize) -> impl Iterator<Item = &CoalitionOutcome> {
        self.coalitions.iter().filter(move |c| c.level == level)
    }

    /// Coalitions decoded from a single survivor.
    pub fn leakage_events(&self) -> usize {
        self.coalitions.iter().filter(|c| c.leaks()).count()
    }

    /// Levels where at least one coalition had no survivors.
    pub fn partial_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .coalitions
            .iter()
            .filter(|c| c.sum.is_none())
            .map(|c| c.level)
            .collect();
        v.dedup();
        v
    }

    /// Real-valued sum of a coalition's survivor segments.
    pub fn dequantized_sum(&self, c: &CoalitionOutcome) -> Result<Option<Vec<f64>>, ProtocolError> {
        let Some(sum) = &c.sum else {
            return Ok(None);
        };
        let spec = &self.quantizers[c.quantizer];
        sum.iter()
            .map(|&v| Ok(dequantize_aggregate(v, c.survivors.len(), spec)?))
            .collect::<Result<Vec<_>, ProtocolError>>()
            .map(Some)
    }

    /// Per-coalition averages (sum / survivors) at one level.
    pub fn level_averages(&self, level: usize) -> Result<Vec<Vec<f64>>, ProtocolError> {
        let mut out = Vec::new();
        for c in self.level(level) {
            if let Some(sum) = self.dequantized_sum(c)? {
                let n = c.survivors.len() as f64;
                out.push(sum.into_iter().map(|v| v / n).collect());
            }
        }
        Ok(out)
    }

    /// Per-level survivor counts.
    pub fn level_survivors(&self, level: usize) -> usize {
        self.level(level).map(|c| c.survivors.len()).sum()
    }
}

/// Remove all masks from the received segments.
///
/// Segments from users listed in `dropped` are ignored (they arrived too
/// late). Every other user must have sent one segment per level.
pub fn server_decode(
    config: &ProtocolConfig,
    plan: &CoalitionPlan,
    board: &PublicBoard,
    segments: &[MaskedSegment],
    dropped: &BTreeSet<usize>,
    responses: &[UnmaskResponse],
) -> Result<RoundOutcome, ProtocolError> {
    config.check_plan(plan)?;
    let n = config.topology.user_count();
    if board.public_keys.len() != n {
        return Err(ProtocolError::ShapeMismatch {
            what: "public keys",
            expected: n,
            got: board.public_keys.len(),
        });
    }
    let survivors: Vec<usize> = (0..n).filter(|u| !dropped.contains(u)).collect();
    if survivors.len() < board.threshold {
        return Err(ProtocolError::TooFewSurvivors {
            survivors: survivors.len(),
            threshold: board.threshold,
        });
    }
    let seg_len = config.segment_len(plan);

    let mut received: BTreeMap<(usize, usize), &MaskedSegment> = BTreeMap::new();
    let mut bits_per_user = vec![0; n];
    for s in segments.iter().filter(|s| s.user < n && !dropped.contains(&s.user)) {
        received.insert((s.user, s.level), s);
        bits_per_user[s.user] += s.bits();
    }

    // Reconstruct b_i of survivors and sk_j of dropped users.
    let mut b_shares: BTreeMap<usize, Vec<SecretShare>> = BTreeMap::new();
    let mut sk_shares: BTreeMap<usize, Vec<SecretShare>> = BTreeMap::new();
    let mut responders = BTreeSet::new();
    for r in responses {
        if dropped.contains(&r.from) || !responders.insert(r.from) {
            continue;
        }
        for s in &r.private_seed_shares {
            b_shares.entry(s.owner).or_default().push(*s);
        }
        for s in &r.secret_key_shares {
            sk_shares.entry(s.owner).or_default().push(*s);
        }
    }
    let field = config.share_field;
    let needs_private: BTreeSet<usize> = survivors.iter().copied().collect();
    let mut private_seeds = BTreeMap::new();
    for &u in &needs_private {
        let shares = b_shares.get(&u).map(Vec::as_slice).unwrap_or(&[]);
        if shares.len() < board.threshold {
            return Err(CryptoError::InsufficientShares {
                needed: board.threshold,
                got: shares.len(),
            }
            .into());
        }
        private_seeds.insert(u, Seed(shamir_reconstruct(field, shares)?));
    }
    let mut dropped_keys = BTreeMap::new();
    for &d in dropped.iter().filter(|&&d| d < n) {
        let shares = sk_shares.get(&d).map(Vec::as_slice).unwrap_or(&[]);
        if shares.len() < board.threshold {
            return Err(CryptoError::InsufficientShares {
                needed: board.threshold,
                got: shares.len(),
            }
            .into());
        }
        let key = SecretKey::from_exponent(shamir_reconstruct(field, shares)?, config.key_group);
        if key.public_key() != board.public_keys[d] {
            return Err(ProtocolError::KeyMismatch { user: d });
        }
        dropped_keys.insert(d, key);
    }

    let mut coalitions = Vec::new();
    for level in 0..plan.level_count() {
        for (index, c) in plan.level(level).iter().enumerate() {
            let (_, r) = config.coalition_ring(plan, level, index)?;
            let members = config.coalition_members(plan, level, index);
            let alive: Vec<usize> = members.iter().copied().filter(|u| !dropped.contains(u)).collect();
            let gone: Vec<usize> = members.iter().copied().filter(|u| dropped.contains(u)).collect();
            let stream = |seed: Seed| prg_expand(seed.for_level(board.round, level), seg_len, r);

            let sum = if alive.is_empty() {
                None
            } else {
                let mut acc = vec![0u64; seg_len];
                for &u in &alive {
                    let seg = received
                        .get(&(u, level))
                        .ok_or(ProtocolError::MissingSegment { user: u, level })?;
                    if seg.modulus != r {
                        return Err(ProtocolError::ModulusMismatch {
                            user: u,
                            level,
                            expected: r.get(),
                            got: seg.modulus.get(),
                        });
                    }
                    if seg.payload.len() != seg_len {
                        return Err(ProtocolError::ShapeMismatch {
                            what: "segment length",
                            expected: seg_len,
                            got: seg.payload.len(),
                        });
                    }
                    let private = stream(private_seeds[&u])?;
                    for k in 0..seg_len {
                        acc[k] = r.sub(r.add(acc[k], seg.payload[k]), private[k]);
                    }
                    // Pairwise masks shared with dropped members did not cancel.
                    for &d in &gone {
                        let seed = derive_pairwise_seed(&dropped_keys[&d], &board.public_keys[u])?;
                        let z = stream(seed)?;
                        for k in 0..seg_len {
                            acc[k] = if u < d {
                                r.sub(acc[k], z[k])
                            } else {
                                r.add(acc[k], z[k])
                            };
                        }
                    }
                }
                Some(acc)
            };
            coalitions.push(CoalitionOutcome {
                level,
                coalition: index,
                quantizer: c.quantizer,
                modulus: r,
                members,
                survivors: alive,
                sum,
            });
        }
    }

    Ok(RoundOutcome {
        round: board.round,
        model_len: config.model_len,
        segment_len: seg_len,
        levels: plan.level_count(),
        coalitions,
        survivors,
        dropped: dropped.iter().copied().filter(|&d| d < n).collect(),
        bits_per_user,
        quantizers: config.quantizers.clone(),
    })
}

/// Sum every level's decoded coalitions in the reals and concatenate the
/// levels, dropping the padding. The result is the sum of survivors' updates.
pub fn reassemble(outcome: &RoundOutcome) -> Result<Vec<f64>, ProtocolError> {
    let mut out = Vec::with_capacity(outcome.levels * outcome.segment_len);
    for level in 0..outcome.levels {
        let mut acc = vec![0.0; outcome.segment_len];
        let mut decoded = false;
        for c in outcome.level(level) {
            if let Some(sum) = outcome.dequantized_sum(c)? {
                decoded = true;
                for (a, v) in acc.iter_mut().zip(sum) {
                    *a += v;
                }
            }
        }
        if !decoded {
            return Err(ProtocolError::IncompleteRound { level });
        }
        out.extend(acc);
    }
    out.truncate(outcome.model_len);
    Ok(out)
}

/// Everything one simulated round produced.
#[derive(Clone, Debug)]
pub struct RoundRun {
    pub outcome: RoundOutcome,
    pub segments: Vec<MaskedSegment>,
    /// Quantized level indices per user (empty for dropped users).
    pub quantized: Vec<Vec<Vec<u64>>>,
}

/// Set up, encode every surviving user's update, collect shares and decode.
pub fn run_round<R: Rng + ?Sized>(
    config: &ProtocolConfig,
    plan: &CoalitionPlan,
    round: u64,
    updates: &[Vec<f64>],
    dropped: &BTreeSet<usize>,
    rng: &mut R,
) -> Result<RoundRun, ProtocolError> {
    let n = config.topology.user_count();
    if updates.len() != n {
        return Err(ProtocolError::ShapeMismatch {
            what: "update count",
            expected: n,
            got: updates.len(),
        });
    }
    let (board, users) = setup_round(config, round, rng)?;
    let mut segments = Vec::new();
    let mut quantized = vec![Vec::new(); n];
    for user in users.iter().filter(|u| !dropped.contains(&u.id)) {
        let q = quantize_segments(config, plan, user.column, &updates[user.id], rng)?;
        segments.extend(mask_segments(user, config, plan, &q)?);
        quantized[user.id] = q;
    }
    let request = UnmaskRequest {
        survivors: (0..n).filter(|u| !dropped.contains(u)).collect(),
        dropped: dropped.iter().copied().filter(|&d| d < n).collect(),
    };
    let responses = users
        .iter()
        .filter(|u| !dropped.contains(&u.id))
        .map(|u| u.respond(&request))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome = server_decode(config, plan, &board, &segments, dropped, &responses)?;
    Ok(RoundRun {
        outcome,
        segments,
        quantized,
    })
}

/// One record per line: `round<TAB>user<TAB>level<TAB>coalition<TAB>R<TAB>payload`,
/// with the payload as comma-separated integers. Lines starting with `#`
/// and blank lines are ignored when parsing.
pub fn write_transcript(round: u64, segments: &[MaskedSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        let payload: Vec<String> = s.payload.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{round}\t{}\t{}\t{}\t{}\t{}",
            s.user,
            s.level,
            s.coalition,
            s.modulus.get(),
            payload.join(",")
        );
    }
    out
}

pub fn parse_transcript(text: &str) -> Result<Vec<(u64, MaskedSegment)>, ProtocolError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fail = |reason: String| ProtocolError::Transcript { line: line_no, reason };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 6 {
            return Err(fail(format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |s: &str, name: &str| s.parse::<u64>().map_err(|e| fail(format!("bad {name} '{s}': {e}")));
        let round = num(fields[0], "round")?;
        let user = num(fields[1], "user")? as usize;
        let level = num(fields[2], "level")? as usize;
        let coalition = num(fields[3], "coalition")? as usize;
        let modulus = RingModulus::new(num(fields[4], "modulus")?).map_err(|e| fail(e.to_string()))?;
        let payload = fields[5]
            .split(',')
            .map(|v| num(v, "payload entry"))
            .collect::<Result<Vec<u64>, _>>()?;
        if let Some(bad) = payload.iter().find(|&&v| v >= modulus.get()) {
            return Err(fail(format!("payload entry {bad} outside Z_{}", modulus.get())));
        }
        out.push((
            round,
            MaskedSegment {
                user,
                level,
                coalition,
                modulus,
                payload,
            },
        ));
    }
    Ok(out)
}

/// Masking where each user works in its own ring, the scheme the segment
/// plan replaces. Kept to demonstrate why it decodes wrongly.
pub mod naive {
    /// Each entry is `(x, mask, modulus)`; the user sends `x + mask mod modulus`
    /// and the server adds the messages modulo `server_modulus`.
    pub fn per_user_modulus_sum(entries: &[(u64, i64, u64)], server_modulus: u64) -> u64 {
        entries
            .iter()
            .map(|&(x, mask, m)| (x as i64 + mask).rem_euclid(m as i64) as u64)
            .sum::<u64>()
            % server_modulus
    }
}
