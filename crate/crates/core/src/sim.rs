//! Federated training on synthetic convex tasks with every round aggregated
//! through the secure protocol.
//!
//! Each round, every user computes a local gradient `g_i` at the current
//! model and sends `x_i = -eta g_i`; Byzantine users corrupt theirs first.
//! The server decodes the coalition sums and moves the model by either the
//! survivor average or the per-level coordinate median.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{sigma_heterosag_plus, AnalysisError, ErrorBoundInput};
use crate::byzantine::{flip_label, inject_attack, median_aggregate, AttackKind, ByzantineError};
use crate::plan::CoalitionPlan;
use crate::protocol::{reassemble, run_round, upload_bits, ProtocolConfig, ProtocolError, Topology};
use crate::quantize::{QuantizerSpec, Rounding};

/// Levels used when quantization is switched off: fine enough that nearest
/// rounding is below 1e-12 on `[-1, 1]`.
pub const UNQUANTIZED_LEVELS: u64 = (1 << 40) + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("round {round}: {source}")]
    Round { round: usize, source: ProtocolError },

    #[error("round {round}: {source}")]
    Aggregation { round: usize, source: ByzantineError },

    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl SimError {
    pub fn is_config_error(&self) -> bool {
        match self {
            SimError::Config(_) | SimError::Analysis(_) => true,
            SimError::Round { source, .. } => source.is_config_error(),
            SimError::Aggregation { .. } => false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// `G`; may be omitted when `subgroups` is given.
    #[serde(default)]
    pub groups: Option<usize>,
    /// Users per group, or per subgroup when `subgroups` is given.
    pub group_size: usize,
    /// `L_g` per group.
    #[serde(default)]
    pub subgroups: Option<Vec<usize>>,
}

impl TopologyConfig {
    pub fn subgroup_layout(&self) -> Result<Vec<usize>, SimError> {
        match (&self.subgroups, self.groups) {
            (Some(l), Some(g)) if l.len() != g => Err(config_err(format!(
                "groups = {g} but {} subgroup counts given",
                l.len()
            ))),
            (Some(l), _) => Ok(l.clone()),
            (None, Some(g)) => Ok(vec![1; g]),
            (None, None) => Err(config_err("topology needs groups or subgroups")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    #[default]
    Stochastic,
    Nearest,
    /// Bypass quantization: `UNQUANTIZED_LEVELS` everywhere, nearest rounding.
    Off,
}

fn default_lower() -> f64 {
    -1.0
}

fn default_upper() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    /// `K_g` per group, non-decreasing.
    #[serde(default)]
    pub levels: Vec<u64>,
    #[serde(default = "default_lower")]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
    #[serde(default)]
    pub mode: QuantMode,
}

fn default_center_spread() -> f64 {
    0.3
}
fn default_user_spread() -> f64 {
    0.1
}
fn default_min_curvature() -> f64 {
    0.5
}
fn default_samples() -> usize {
    50
}
fn default_separation() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// `F(theta) = (1/N) sum_i 1/2 sum_k a_k (theta_k - c_ik)^2` with
    /// curvatures `a_k` in `[min_curvature, 1]`, so `L = max a_k <= 1`.
    Quadratic {
        /// Half-width of the range the common centre is drawn from.
        #[serde(default = "default_center_spread")]
        center_spread: f64,
        /// Half-width of each user's offset from the common centre.
        #[serde(default = "default_user_spread")]
        user_spread: f64,
        #[serde(default = "default_min_curvature")]
        min_curvature: f64,
    },
    /// Logistic regression on two Gaussian blobs; the model is the weight
    /// vector followed by a bias, so features = `model_len - 1`.
    LogisticBlobs {
        #[serde(default = "default_samples")]
        samples_per_user: usize,
        /// Distance between the blob centres.
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub byzantine: Vec<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            byzantine: Vec::new(),
        }
    }
}

fn default_loss_window() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub topology: TopologyConfig,
    pub quantization: QuantizationConfig,
    /// `m`.
    pub model_len: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub attack: AttackConfig,
    /// Per-round, per-user dropout probability.
    #[serde(default)]
    pub dropout: f64,
    /// `eta`.
    pub learning_rate: f64,
    /// `J`.
    pub rounds: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub threshold: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Upload rate of each group's users in Mb/s.
    #[serde(default)]
    pub rates_mbps: Option<Vec<f64>>,
    /// Rounds averaged for the reported final loss.
    #[serde(default = "default_loss_window")]
    pub loss_window: usize,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.protocol_config()?;
        let n = self.user_count()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.rounds == 0 {
            return Err(config_err("rounds must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if let Some(&b) = self.attack.byzantine.iter().find(|&&b| b >= n) {
            return Err(config_err(format!("byzantine user {b} does not exist (N = {n})")));
        }
        self.attack.kind.validate().map_err(|e| config_err(e.to_string()))?;
        if let Some(rates) = &self.rates_mbps {
            let groups = self.topology.subgroup_layout()?.len();
            if rates.len() != groups || rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(config_err(format!(
                    "rates_mbps needs {groups} positive entries, got {rates:?}"
                )));
            }
        }
        match self.task {
            TaskSpec::Quadratic {
                center_spread,
                user_spread,
                min_curvature,
            } => {
                if !(center_spread >= 0.0 && user_spread >= 0.0 && min_curvature > 0.0 && min_curvature <= 1.0) {
                    return Err(config_err("quadratic task parameters out of range"));
                }
            }
            TaskSpec::LogisticBlobs {
                samples_per_user,
                separation,
            } => {
                if self.model_len < 2 || samples_per_user == 0 || !separation.is_finite() {
                    return Err(config_err(
                        "logistic task needs model_len >= 2, samples_per_user >= 1 and finite separation",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn user_count(&self) -> Result<usize, SimError> {
        let z: usize = self.topology.subgroup_layout()?.iter().sum();
        Ok(z * self.topology.group_size)
    }

    /// Quantizer levels per group after applying the mode.
    pub fn effective_levels(&self) -> Result<Vec<u64>, SimError> {
        let groups = self.topology.subgroup_layout()?.len();
        if self.quantization.mode == QuantMode::Off {
            return Ok(vec![UNQUANTIZED_LEVELS; groups]);
        }
        let levels = &self.quantization.levels;
        if levels.len() != groups {
            return Err(config_err(format!(
                "{groups} groups need {groups} quantizer levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|&k| k < 2) || levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err(format!(
                "quantizer levels must be >= 2 and non-decreasing, got {levels:?}"
            )));
        }
        Ok(levels.clone())
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig, SimError> {
        let layout = self.topology.subgroup_layout()?;
        let topology = Topology::new(layout, self.topology.group_size).map_err(|e| config_err(e.to_string()))?;
        let q = &self.quantization;
        let quantizers = self
            .effective_levels()?
            .into_iter()
            .map(|k| QuantizerSpec::new(k, q.lower, q.upper))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| config_err(e.to_string()))?;
        let mut config =
            ProtocolConfig::new(topology, quantizers, self.model_len).map_err(|e| config_err(e.to_string()))?;
        if let Some(t) = self.threshold {
            config = config.with_threshold(t).map_err(|e| config_err(e.to_string()))?;
        }
        if q.mode != QuantMode::Stochastic {
            config = config.with_rounding(Rounding::Nearest);
        }
        Ok(config)
    }

    pub fn plan(&self) -> Result<CoalitionPlan, SimError> {
        let layout = self.topology.subgroup_layout()?;
        Topology::new(layout, self.topology.group_size)
            .and_then(|t| t.plan().map_err(ProtocolError::from))
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn error_bound_input(&self) -> Result<ErrorBoundInput, SimError> {
        Ok(ErrorBoundInput {
            users: self.user_count()?,
            group_size: self.topology.group_size,
            subgroups: self.topology.subgroup_layout()?,
            model_len: self.model_len,
            lower: self.quantization.lower,
            upper: self.quantization.upper,
            levels: self.effective_levels()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub curvature: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LogisticTask {
    /// Per user: samples as (features, label in {0, 1}).
    pub data: Vec<Vec<(Vec<f64>, f64)>>,
}

#[derive(Clone, Debug)]
pub enum Task {
    Quadratic(QuadraticTask),
    Logistic(LogisticTask),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Task {
    /// Generate task data; deterministic in `seed`.
    pub fn build(spec: &TaskSpec, users: usize, model_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1);
        match *spec {
            TaskSpec::Quadratic {
                center_spread,
                user_spread,
                min_curvature,
            } => {
                let curvature = (0..model_len).map(|_| rng.random_range(min_curvature..=1.0)).collect();
                let center: Vec<f64> = (0..model_len)
                    .map(|_| rng.random_range(-center_spread..=center_spread))
                    .collect();
                let centers = (0..users)
                    .map(|_| {
                        center
                            .iter()
                            .map(|c| c + rng.random_range(-user_spread..=user_spread))
                            .collect()
                    })
                    .collect();
                Task::Quadratic(QuadraticTask { curvature, centers })
            }
            TaskSpec::LogisticBlobs {
                samples_per_user,
                separation,
            } => {
                let d = model_len - 1;
                let scale = separation / 2.0 / (d as f64).sqrt();
                let data = (0..users)
                    .map(|_| {
                        (0..samples_per_user)
                            .map(|_| {
                                let label = if rng.random::<bool>() { 1.0 } else { 0.0 };
                                let sign = 2.0 * label - 1.0;
                                let x = (0..d)
                                    .map(|_| {
                                        let noise: f64 = StandardNormal.sample(&mut rng);
                                        sign * scale + noise
                                    })
                                    .collect();
                                (x, label)
                            })
                            .collect()
                    })
                    .collect();
                Task::Logistic(LogisticTask { data })
            }
        }
    }

    pub fn users(&self) -> usize {
        match self {
            Task::Quadratic(q) => q.centers.len(),
            Task::Logistic(l) => l.data.len(),
        }
    }

    /// Global loss `F(theta)`, the average of the users' local losses.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.users() as f64;
        (0..self.users()).map(|i| self.local_loss(i, theta)).sum::<f64>() / n
    }

    pub fn local_loss(&self, user: usize, theta: &[f64]) -> f64 {
        match self {
            Task::Quadratic(q) => q
                .curvature
                .iter()
                .zip(theta.iter().zip(&q.centers[user]))
                .map(|(a, (t, c))| 0.5 * a * (t - c).powi(2))
                .sum(),
            Task::Logistic(l) => {
                let samples = &l.data[user];
                let d = theta.len() - 1;
                samples
                    .iter()
                    .map(|(x, y)| {
                        let z: f64 = x.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                        // -y log s(z) - (1 - y) log(1 - s(z))
                        softplus(z) - y * z
                    })
                    .sum::<f64>()
                    / samples.len() as f64
            }
        }
    }

    /// Full-batch local gradient. `label_shift` replaces labels `y` with
    /// `|y - shift|` (ignored by the quadratic task, which has no labels).
    pub fn local_gradient(&self, user: usize, theta: &[f64], label_shift: Option<f64>) -> Vec<f64> {
        match self {
            Task::Quadratic(q) => q
                .curvature
                .iter()
                .zip(theta.iter().zip(&q.centers[user]))
                .map(|(a, (t, c))| a * (t - c))
                .collect(),
            Task::Logistic(l) => {
                let samples = &l.data[user];
                let d = theta.len() - 1;
                let mut grad = vec![0.0; d + 1];
                for (x, y) in samples {
                    let y = label_shift.map_or(*y, |s| flip_label(*y, s));
                    let z: f64 = x.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                    let r = sigmoid(z) - y;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                    grad[d] += r;
                }
                let n = samples.len() as f64;
                grad.iter_mut().for_each(|g| *g /= n);
                grad
            }
        }
    }

    /// `(theta*, F*)` when known in closed form.
    pub fn optimum(&self) -> Option<(Vec<f64>, f64)> {
        match self {
            Task::Quadratic(q) => {
                let n = q.centers.len() as f64;
                let m = q.curvature.len();
                let theta: Vec<f64> = (0..m)
                    .map(|k| q.centers.iter().map(|c| c[k]).sum::<f64>() / n)
                    .collect();
                let f = self.loss(&theta);
                Some((theta, f))
            }
            Task::Logistic(_) => None,
        }
    }

    /// Lipschitz constant of the global gradient when known.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            Task::Quadratic(q) => q.curvature.iter().copied().reduce(f64::max),
            Task::Logistic(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    /// 1-based round index.
    pub round: usize,
    /// `F(theta)` after this round's update.
    pub loss: f64,
    /// `F(theta) - F*` when the optimum is known.
    pub gap: Option<f64>,
    pub survivors: usize,
    pub leakage_events: usize,
    pub partial_levels: usize,
    /// Bits received by the server from each group this round.
    pub bits_per_group: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainingLog {
    pub rows: Vec<RoundLog>,
    pub initial: Vec<f64>,
    pub theta: Vec<f64>,
    /// `(1/J) sum_{t=1}^{J} theta^(t)`.
    pub average_iterate: Vec<f64>,
    pub optimum: Option<(Vec<f64>, f64)>,
    /// Every iterate `theta^(1..=J)`, kept for oracle comparisons.
    pub trajectory: Vec<Vec<f64>>,
    task: Task,
    loss_window: usize,
}

/// Nine significant digits.
fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

impl TrainingLog {
    pub fn task(&self) -> &Task {
        &self.task
    }

    /// Mean loss over the last `loss_window` rounds.
    pub fn final_loss(&self) -> f64 {
        let k = self.loss_window.clamp(1, self.rows.len());
        self.rows[self.rows.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// `F(average iterate) - F*`.
    pub fn average_iterate_gap(&self) -> Option<f64> {
        self.optimum
            .as_ref()
            .map(|(_, f)| self.task.loss(&self.average_iterate) - f)
    }

    pub fn leakage_events(&self) -> usize {
        self.rows.iter().map(|r| r.leakage_events).sum()
    }

    /// Columns: `round,loss,gap,survivors,leakage_events,partial_levels,bits_g0,...`.
    pub fn to_csv(&self) -> String {
        let groups = self.rows.first().map_or(0, |r| r.bits_per_group.len());
        let mut out = String::from("round,loss,gap,survivors,leakage_events,partial_levels");
        for g in 0..groups {
            let _ = write!(out, ",bits_g{g}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                fmt_float(r.loss),
                r.gap.map(fmt_float).unwrap_or_default(),
                r.survivors,
                r.leakage_events,
                r.partial_levels
            );
            for b in &r.bits_per_group {
                let _ = write!(out, ",{b}");
            }
            out.push('\n');
        }
        out
    }
}

/// Right-hand side of the convergence guarantee for this run:
/// `||theta0 - theta*||^2 / (2 eta J) + eta sigma_g`.
///
/// The quantizer sees `eta g` rather than `g`, so its error bound in
/// gradient units is `sigma_g = sigma / eta^2`.
pub fn convergence_bound(config: &RoundConfig, log: &TrainingLog) -> Result<Option<f64>, SimError> {
    let Some((opt, _)) = &log.optimum else {
        return Ok(None);
    };
    let sigma = sigma_heterosag_plus(&config.error_bound_input()?)?;
    let dist: f64 = log.initial.iter().zip(opt).map(|(a, b)| (a - b).powi(2)).sum();
    let eta = config.learning_rate;
    Ok(Some(dist / (2.0 * eta * config.rounds as f64) + sigma / eta))
}

/// Train for `config.rounds` rounds from `theta = 0`. Fully determined by
/// `config` and `seed`.
pub fn run_training(config: &RoundConfig, seed: u64) -> Result<TrainingLog, SimError> {
    config.validate()?;
    let protocol = config.protocol_config()?;
    let plan = config.plan()?;
    let n = protocol.topology.user_count();
    let groups = protocol.topology.group_count();
    let task = Task::build(&config.task, n, config.model_len, seed);
    let optimum = task.optimum();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let byzantine: BTreeSet<usize> = match config.attack.kind {
        AttackKind::None => BTreeSet::new(),
        _ => config.attack.byzantine.iter().copied().collect(),
    };
    let label_shift = match config.attack.kind {
        AttackKind::LabelFlip { shift, .. } => Some(shift),
        _ => None,
    };
    let eta = config.learning_rate;

    let initial = vec![0.0; config.model_len];
    let mut theta = initial.clone();
    let mut sum_theta = vec![0.0; config.model_len];
    let mut rows = Vec::with_capacity(config.rounds);
    let mut trajectory = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let dropped: BTreeSet<usize> = (0..n).filter(|_| rng.random::<f64>() < config.dropout).collect();
        let mut updates = Vec::with_capacity(n);
        for user in 0..n {
            let bad = byzantine.contains(&user);
            let shift = if bad { label_shift } else { None };
            let update: Vec<f64> = task
                .local_gradient(user, &theta, shift)
                .into_iter()
                .map(|g| -eta * g)
                .collect();
            updates.push(if bad {
                inject_attack(&update, &config.attack.kind, &mut rng)
                    .map_err(|source| SimError::Aggregation { round, source })?
            } else {
                update
            });
        }

        let run = run_round(&protocol, &plan, round as u64, &updates, &dropped, &mut rng)
            .map_err(|source| SimError::Round { round, source })?;
        let outcome = &run.outcome;
        let step = match config.aggregation {
            Aggregation::Mean => {
                let total = reassemble(outcome).map_err(|source| SimError::Round { round, source })?;
                let survivors = outcome.survivors.len() as f64;
                total.into_iter().map(|v| v / survivors).collect::<Vec<_>>()
            }
            Aggregation::Median => {
                median_aggregate(outcome).map_err(|source| SimError::Aggregation { round, source })?
            }
        };
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += s;
        }
        for (acc, t) in sum_theta.iter_mut().zip(&theta) {
            *acc += t;
        }
        trajectory.push(theta.clone());

        let mut bits_per_group = vec![0u64; groups];
        for (user, bits) in outcome.bits_per_user.iter().enumerate() {
            bits_per_group[protocol.topology.group_of(user)] += bits;
        }
        let loss = task.loss(&theta);
        rows.push(RoundLog {
            round,
            loss,
            gap: optimum.as_ref().map(|(_, f)| loss - f),
            survivors: outcome.survivors.len(),
            leakage_events: outcome.leakage_events(),
            partial_levels: outcome.partial_levels().len(),
            bits_per_group,
        });
    }

    let j = config.rounds as f64;
    Ok(TrainingLog {
        rows,
        initial,
        theta,
        average_iterate: sum_theta.into_iter().map(|s| s / j).collect(),
        optimum,
        trajectory,
        task,
        loss_window: config.loss_window,
    })
}

/// Default upload rates: 1 Mb/s for the straggler group 0, 2.5 Mb/s above.
pub fn default_rates(groups: usize) -> Vec<f64> {
    (0..groups).map(|g| if g == 0 { 1.0 } else { 2.5 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommunicationTime {
    /// Upload bits per round of one user in each group.
    pub bits_per_user: Vec<u64>,
    pub rates_mbps: Vec<f64>,
    /// `max_g bits_g / rate_g`.
    pub seconds_per_round: f64,
    /// Group whose users finish last.
    pub slowest_group: usize,
}

/// Per-round upload time of a configuration; the slowest group governs.
pub fn communication_time(config: &RoundConfig) -> Result<CommunicationTime, SimError> {
    let protocol = config.protocol_config()?;
    let plan = config.plan()?;
    let topology = &protocol.topology;
    let groups = topology.group_count();
    let rates = config.rates_mbps.clone().unwrap_or_else(|| default_rates(groups));
    let mut bits_per_user = vec![0u64; groups];
    for column in 0..topology.column_count() {
        let g = topology.column_id(column).group;
        let bits = upload_bits(&protocol, &plan, column).map_err(|e| config_err(e.to_string()))?;
        bits_per_user[g] = bits_per_user[g].max(bits);
    }
    let (slowest_group, seconds_per_round) = bits_per_user
        .iter()
        .zip(&rates)
        .map(|(&b, &r)| b as f64 / (r * 1e6))
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (g, t)| if t > best.1 { (g, t) } else { best },
        );
    Ok(CommunicationTime {
        bits_per_user,
        rates_mbps: rates,
        seconds_per_round,
        slowest_group,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub final_loss: f64,
    pub loss_trajectory: Vec<f64>,
    pub communication: CommunicationTime,
    /// `rounds * seconds_per_round`.
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Total time of row `a` over row `b`.
    pub fn time_ratio(&self, a: usize, b: usize) -> f64 {
        self.rows[a].total_seconds / self.rows[b].total_seconds
    }

    /// Columns: `scenario,final_loss,seconds_per_round,total_seconds,slowest_group,bits_g0,...`.
    pub fn to_csv(&self) -> String {
        let groups = self
            .rows
            .iter()
            .map(|r| r.communication.bits_per_user.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from("scenario,final_loss,seconds_per_round,total_seconds,slowest_group");
        for g in 0..groups {
            let _ = write!(out, ",bits_g{g}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.name,
                fmt_float(r.final_loss),
                fmt_float(r.communication.seconds_per_round),
                fmt_float(r.total_seconds),
                r.communication.slowest_group
            );
            for g in 0..groups {
                let _ = match r.communication.bits_per_user.get(g) {
                    Some(b) => write!(out, ",{b}"),
                    None => write!(out, ","),
                };
            }
            out.push('\n');
        }
        out
    }
}

/// Train every scenario with the same seed and tabulate loss and
/// communication time.
pub fn run_comparison(scenarios: &[(String, RoundConfig)], seed: u64) -> Result<ComparisonTable, SimError> {
    let mut rows = Vec::with_capacity(scenarios.len());
    for (name, config) in scenarios {
        let log = run_training(config, seed)?;
        let communication = communication_time(config)?;
        rows.push(ComparisonRow {
            name: name.clone(),
            final_loss: log.final_loss(),
            loss_trajectory: log.rows.iter().map(|r| r.loss).collect(),
            total_seconds: communication.seconds_per_round * config.rounds as f64,
            communication,
        });
    }
    Ok(ComparisonTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quadratic_config(groups: usize, n: usize, levels: Vec<u64>, m: usize, rounds: usize) -> RoundConfig {
        RoundConfig {
            topology: TopologyConfig {
                groups: Some(groups),
                group_size: n,
                subgroups: None,
            },
            quantization: QuantizationConfig {
                levels,
                lower: -1.0,
                upper: 1.0,
                mode: QuantMode::Stochastic,
            },
            model_len: m,
            task: TaskSpec::Quadratic {
                center_spread: 0.3,
                user_spread: 0.1,
                min_curvature: 0.5,
            },
            attack: AttackConfig::default(),
            dropout: 0.0,
            learning_rate: 1.0,
            rounds,
            aggregation: Aggregation::Mean,
            threshold: None,
            seed: None,
            rates_mbps: None,
            loss_window: 5,
        }
    }

    #[test]
    fn quadratic_gradients_are_exact() {
        let task = Task::build(
            &TaskSpec::Quadratic {
                center_spread: 0.3,
                user_spread: 0.1,
                min_curvature: 0.5,
            },
            4,
            6,
            1,
        );
        let (opt, f_opt) = task.optimum().unwrap();
        let avg: Vec<f64> = (0..6)
            .map(|k| (0..4).map(|i| task.local_gradient(i, &opt, None)[k]).sum::<f64>() / 4.0)
            .collect();
        assert!(avg.iter().all(|g| g.abs() < 1e-15));
        let shifted: Vec<f64> = opt.iter().map(|t| t + 0.1).collect();
        assert!(task.loss(&shifted) > f_opt);
        assert!(task.smoothness().unwrap() <= 1.0);
    }

    #[test]
    fn logistic_gradient_matches_finite_difference() {
        let task = Task::build(
            &TaskSpec::LogisticBlobs {
                samples_per_user: 20,
                separation: 2.0,
            },
            2,
            4,
            3,
        );
        let theta = vec![0.3, -0.2, 0.1, 0.05];
        let g = task.local_gradient(1, &theta, None);
        for k in 0..4 {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[k] += 1e-6;
            lo[k] -= 1e-6;
            let fd = (task.local_loss(1, &hi) - task.local_loss(1, &lo)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn exact_descent_without_quantization() {
        let mut config = quadratic_config(5, 2, vec![], 20, 60);
        config.quantization.mode = QuantMode::Off;
        let log = run_training(&config, 4).unwrap();
        let gaps: Vec<f64> = log.rows.iter().map(|r| r.gap.unwrap()).collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(*gaps.last().unwrap() < 1e-6, "{gaps:?}");
    }

    #[test]
    fn deterministic_csv() {
        let config = quadratic_config(3, 2, vec![2, 4, 8], 9, 4);
        let a = run_training(&config, 11).unwrap().to_csv();
        let b = run_training(&config, 11).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("round,loss,gap,survivors,leakage_events,partial_levels,bits_g0,bits_g1,bits_g2\n"));
        assert_eq!(a.lines().count(), 5);
        let c = run_training(&config, 12).unwrap().to_csv();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let mut c = quadratic_config(3, 2, vec![2, 4], 9, 4);
        assert!(c.validate().unwrap_err().is_config_error());
        c.quantization.levels = vec![4, 2, 8];
        assert!(c.validate().is_err());
        c.quantization.levels = vec![2, 2, 8];
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c.learning_rate = 1.0;
        c.attack.byzantine = vec![6];
        assert!(c.validate().is_err());
        c.attack.byzantine = vec![];
        c.rates_mbps = Some(vec![1.0]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn communication_time_uses_slowest_group() {
        let mut config = quadratic_config(5, 5, vec![2, 6, 8, 10, 12], 100, 1);
        let t = communication_time(&config).unwrap();
        // Per 5 elements: group 0 sends 4 x 4 + 3 bits, group 1 4 + 5 + 3 x 6.
        assert_eq!(t.bits_per_user, vec![20 * 19, 20 * 27, 20 * 30, 20 * 30, 20 * 30]);
        assert_eq!(t.slowest_group, 0);
        config.quantization.levels = vec![2; 5];
        let homogeneous = communication_time(&config).unwrap();
        assert_eq!(homogeneous.seconds_per_round, t.seconds_per_round);
    }
}
