//! Per-agent group-relative advantages and the clipped surrogate objective.
//!
//! For each batch of `G` rollouts, every agent identity `m` gets its own
//! mean and deviation of aggregate reward across the trajectories it took
//! part in. Advantages `(R − μ_m)/(σ_m + δ)` then weight a PPO-style clipped
//! ratio, averaged first over the agents of a trajectory and then over the
//! group.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{coordination_report, Estimator};
use crate::env::{AgentId, FactWorldSpec, QueryInstance, Role};
use crate::policy::{agent_logprob_sum, grad_agent_logprob, PolicyError, PolicyParams, SparseGrad};
use crate::reward::{assign_rewards, RewardError, RewardWeights};
use crate::rollout::{batch_query, collect_group_for, GroupBatch, RolloutError};
use crate::scalar::Real;
use crate::seed::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("batch is missing {0}")]
    Incomplete(&'static str),
    #[error("objective diverged at step {step}: |J| = {objective} exceeds {bound}")]
    Diverged { step: usize, objective: f64, bound: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// How agent identities are pooled for group statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// `(role, slot)`: worker slot 2 is one identity across the batch.
    #[default]
    Slot,
    /// `(role)`: all workers share one identity.
    Role,
}

impl Grouping {
    pub fn key(self, agent: AgentId) -> AgentKey {
        match self {
            Grouping::Slot => AgentKey {
                role: agent.role,
                slot: agent.slot,
            },
            Grouping::Role => AgentKey {
                role: agent.role,
                slot: 0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentKey {
    pub role: Role,
    pub slot: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← θ + η∇J`.
    #[default]
    GradientAscent,
    /// Adam with decoupled weight decay, ascending `J`.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub epsilon_clip: f64,
    pub delta_stab: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub grouping: Grouping,
    pub optimizer: OptimizerKind,
    pub adam: AdamSettings,
    /// Abort when `|J|` exceeds this.
    pub divergence_bound: f64,
    /// Credit estimator for the per-step coordination metrics.
    pub estimator: Estimator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            epsilon_clip: 0.2,
            delta_stab: 1e-6,
            learning_rate: 1e-5,
            steps: 180,
            seed: 0,
            grouping: Grouping::Slot,
            optimizer: OptimizerKind::GradientAscent,
            adam: AdamSettings::default(),
            divergence_bound: 1e6,
            estimator: Estimator::Exact,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        for (name, v) in [
            ("epsilon_clip", self.epsilon_clip),
            ("delta_stab", self.delta_stab),
            ("learning_rate", self.learning_rate),
            ("divergence_bound", self.divergence_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
            || !(a.weight_decay >= 0.0)
        {
            return bad("adam settings need beta1, beta2 in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStat<F> {
    pub mu: F,
    pub sigma: F,
    pub n_samples: usize,
}

/// Per-identity reward statistics of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats<F> {
    pub grouping: Grouping,
    pub entries: BTreeMap<AgentKey, GroupStat<F>>,
}

impl<F: Real> GroupStats<F> {
    pub fn get(&self, agent: AgentId) -> Option<&GroupStat<F>> {
        self.entries.get(&self.grouping.key(agent))
    }
}

/// Mean and population standard deviation of `xs` (σ = 0 for one sample).
pub fn mean_and_std<F: Real>(xs: &[F]) -> (F, F) {
    let n = F::from_count(xs.len());
    let mu = xs.iter().fold(F::zero(), |a, &x| a + x) / n;
    let var = xs.iter().fold(F::zero(), |a, &x| a + (x - mu) * (x - mu)) / n;
    (mu, var.sqrt())
}

/// Statistics of `r_total` per agent identity, over the trajectories that
/// identity appears in.
pub fn group_stats<F: Real>(batch: &GroupBatch<F>, grouping: Grouping) -> Result<GroupStats<F>, OptimError> {
    let rewards = batch.rewards.as_ref().ok_or(OptimError::Incomplete("rewards"))?;
    let mut samples: BTreeMap<AgentKey, Vec<F>> = BTreeMap::new();
    for (t, row) in batch.trajectories.iter().zip(rewards) {
        for (m, r) in t.agents().into_iter().zip(row) {
            samples.entry(grouping.key(m)).or_default().push(r.r_total);
        }
    }
    let entries = samples
        .into_iter()
        .map(|(k, xs)| {
            let (mu, sigma) = mean_and_std(&xs);
            (
                k,
                GroupStat {
                    mu,
                    sigma,
                    n_samples: xs.len(),
                },
            )
        })
        .collect();
    Ok(GroupStats { grouping, entries })
}

/// `(r − μ) / (σ + δ)`.
pub fn advantage<F: Real>(r_total: F, stat: &GroupStat<F>, delta: F) -> F {
    (r_total - stat.mu) / (stat.sigma + delta)
}

/// Fill `batch.advantages` from its rewards.
pub fn assign_advantages<F: Real>(
    batch: &mut GroupBatch<F>,
    grouping: Grouping,
    delta: F,
) -> Result<GroupStats<F>, OptimError> {
    let stats = group_stats(batch, grouping)?;
    let rewards = batch.rewards.as_ref().expect("checked by group_stats");
    let advantages = batch
        .trajectories
        .iter()
        .zip(rewards)
        .map(|(t, row)| {
            t.agents()
                .into_iter()
                .zip(row)
                .map(|(m, r)| advantage(r.r_total, stats.get(m).expect("every agent has stats"), delta))
                .collect()
        })
        .collect();
    batch.advantages = Some(advantages);
    Ok(stats)
}

/// `exp(Σ log π_θ − Σ log π_old)` over `agent`'s actions, exponentiated once.
pub fn policy_ratio<F: Real>(
    params: &PolicyParams<F>,
    old_params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    traj: &crate::env::Trajectory,
    agent: AgentId,
) -> Result<F, PolicyError> {
    let new = agent_logprob_sum(params, spec, traj, agent)?;
    let old = agent_logprob_sum(old_params, spec, traj, agent)?;
    Ok((new - old).exp())
}

/// `min(ρ·Â, clip(ρ, 1−ε, 1+ε)·Â)`.
pub fn clipped_term<F: Real>(ratio: F, advantage: F, epsilon: F) -> F {
    let clipped = ratio.max(F::one() - epsilon).min(F::one() + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch is the active one (so the term depends on θ).
fn unclipped_active<F: Real>(ratio: F, advantage: F, epsilon: F) -> bool {
    let clipped = ratio.max(F::one() - epsilon).min(F::one() + epsilon);
    ratio * advantage <= clipped * advantage
}

fn advantages_of<F: Real>(batch: &GroupBatch<F>) -> Result<&Vec<Vec<F>>, OptimError> {
    batch.advantages.as_ref().ok_or(OptimError::Incomplete("advantages"))
}

/// `J = (1/G) Σ_i (1/|{0}∪M_i|) Σ_m clipped_term(ρ_im, Â_im, ε)`.
pub fn sharp_objective<F: Real>(
    batch: &GroupBatch<F>,
    params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    epsilon: F,
) -> Result<F, OptimError> {
    let advantages = advantages_of(batch)?;
    let per_traj = batch
        .trajectories
        .par_iter()
        .zip(advantages)
        .map(|(t, adv)| {
            let mut sum = F::zero();
            for (m, &a) in t.agents().into_iter().zip(adv) {
                let ratio = policy_ratio(params, &batch.old_params, spec, t, m)?;
                sum += clipped_term(ratio, a, epsilon);
            }
            Ok(sum / F::from_count(adv.len()))
        })
        .collect::<Result<Vec<F>, PolicyError>>()?;
    let total = per_traj.into_iter().fold(F::zero(), |a, b| a + b);
    Ok(total / F::from_count(batch.group_size()))
}

/// Exact `∇_θ J` with advantages and old-policy terms held fixed. Terms on
/// the clipped branch are constant in θ and contribute nothing.
pub fn objective_gradient<F: Real>(
    batch: &GroupBatch<F>,
    params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    epsilon: F,
) -> Result<SparseGrad<F>, OptimError> {
    let advantages = advantages_of(batch)?;
    let g = F::from_count(batch.group_size());
    let per_traj = batch
        .trajectories
        .par_iter()
        .zip(advantages)
        .map(|(t, adv)| {
            let mut grad = SparseGrad::default();
            let n = F::from_count(adv.len());
            for (m, &a) in t.agents().into_iter().zip(adv) {
                let ratio = policy_ratio(params, &batch.old_params, spec, t, m)?;
                if a.is_zero() || !unclipped_active(ratio, a, epsilon) {
                    continue;
                }
                let score = grad_agent_logprob(params, spec, t, m)?;
                grad.add_scaled(&score, ratio * a / (g * n));
            }
            Ok(grad)
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    // fixed-order reduction keeps parallel and serial runs bit-identical
    let mut total = SparseGrad::default();
    for grad in &per_traj {
        total.add_scaled(grad, F::one());
    }
    Ok(total)
}

/// Parameter update rule with its state.
#[derive(Clone, Debug)]
pub enum Optimizer<F> {
    GradientAscent {
        lr: F,
    },
    AdamW {
        lr: F,
        settings: AdamSettings,
        m: Vec<F>,
        v: Vec<F>,
        t: i32,
    },
}

impl<F: Real> Optimizer<F> {
    pub fn new(config: &TrainConfig, params: &PolicyParams<F>) -> Self {
        let lr = F::lit(config.learning_rate);
        match config.optimizer {
            OptimizerKind::GradientAscent => Optimizer::GradientAscent { lr },
            OptimizerKind::AdamW => {
                let n = params.flat().len();
                Optimizer::AdamW {
                    lr,
                    settings: config.adam,
                    m: vec![F::zero(); n],
                    v: vec![F::zero(); n],
                    t: 0,
                }
            }
        }
    }

    /// Ascend along `grad`.
    pub fn step(&mut self, params: &mut PolicyParams<F>, grad: &SparseGrad<F>) -> Result<(), PolicyError> {
        match self {
            Optimizer::GradientAscent { lr } => params.apply(grad, *lr),
            Optimizer::AdamW { lr, settings, m, v, t } => {
                *t += 1;
                let (b1, b2) = (F::lit(settings.beta1), F::lit(settings.beta2));
                let eps = F::lit(settings.eps);
                let wd = F::lit(settings.weight_decay);
                let bc1 = F::one() - b1.powi(*t);
                let bc2 = F::one() - b2.powi(*t);
                let g = grad.to_flat(params.layout());
                let mut theta = params.flat();
                for i in 0..theta.len() {
                    m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] = theta[i] + *lr * (m_hat / (v_hat.sqrt() + eps)) - *lr * wd * theta[i];
                }
                params.set_flat(&theta);
                params.bump_version();
                Ok(())
            }
        }
    }
}

/// Where training queries come from.
#[derive(Clone, Debug, Default)]
pub enum QueryStream {
    /// A fresh query per step drawn from the world's distribution.
    #[default]
    Sampled,
    /// Cycle through a fixed list.
    Cycle(Vec<QueryInstance>),
}

/// Seed of training step `step`.
pub fn step_seed(run_seed: u64, step: usize) -> u64 {
    derive_seed(&[run_seed, step as u64])
}

/// One row of the training record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub objective: f64,
    pub success: f64,
    pub planner_credit: f64,
    pub harmful_fraction: f64,
    pub useful_fraction: f64,
    pub replays: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub params: PolicyParams<F>,
    pub rows: Vec<TrainRow>,
    /// Milliseconds per step; kept apart from `rows`, which are deterministic.
    pub wall_clock_ms: Vec<f64>,
    pub total_replays: usize,
}

pub const TRAIN_RECORD_HEADER: &str = "step,objective,success,planner_credit,harmful_fraction,useful_fraction,replays";

impl TrainRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{}",
            self.step,
            self.objective,
            self.success,
            self.planner_credit,
            self.harmful_fraction,
            self.useful_fraction,
            self.replays
        )
    }
}

/// Rewards, advantages, objective and gradient for a collected batch.
pub struct StepResult<F> {
    pub objective: F,
    pub gradient: SparseGrad<F>,
    pub stats: GroupStats<F>,
    pub replays: usize,
}

/// Score a collected batch in place and differentiate the objective at the
/// batch's own snapshot.
pub fn score_batch<F: Real>(
    batch: &mut GroupBatch<F>,
    spec: &FactWorldSpec,
    config: &TrainConfig,
    weights: &RewardWeights,
) -> Result<StepResult<F>, OptimError> {
    let replays = assign_rewards(batch, weights)?;
    let stats = assign_advantages(batch, config.grouping, F::lit(config.delta_stab))?;
    let eps = F::lit(config.epsilon_clip);
    let params = batch.old_params.clone();
    let objective = sharp_objective(batch, &params, spec, eps)?;
    let gradient = objective_gradient(batch, &params, spec, eps)?;
    Ok(StepResult {
        objective,
        gradient,
        stats,
        replays,
    })
}

/// Collect → reward → normalize → ascend, `config.steps` times. `observe`
/// sees every scored batch together with its record row.
pub fn train_with<F: Real>(
    spec: &FactWorldSpec,
    config: &TrainConfig,
    weights: &RewardWeights,
    init: PolicyParams<F>,
    queries: &QueryStream,
    mut observe: impl FnMut(&GroupBatch<F>, &TrainRow),
) -> Result<TrainOutcome<F>, OptimError> {
    config.validate()?;
    weights.validate()?;
    spec.validate().map_err(|e| OptimError::InvalidConfig(e.to_string()))?;
    init.check_layout(spec)?;
    let mut params = init;
    let mut optimizer = Optimizer::new(config, &params);
    let mut rows = Vec::with_capacity(config.steps);
    let mut wall_clock_ms = Vec::with_capacity(config.steps);
    let mut total_replays = 0;
    for step in 0..config.steps {
        let started = Instant::now();
        let base_seed = step_seed(config.seed, step);
        let query = match queries {
            QueryStream::Sampled => batch_query(spec, base_seed),
            QueryStream::Cycle(qs) if !qs.is_empty() => qs[step % qs.len()].clone(),
            QueryStream::Cycle(_) => return Err(OptimError::InvalidConfig("empty query list".into())),
        };
        let mut batch = collect_group_for(spec, &params, query, config.group_size, base_seed)?;
        let result = score_batch(&mut batch, spec, config, weights)?;
        let objective = result.objective.as_f64();
        if !objective.is_finite() || objective.abs() > config.divergence_bound {
            return Err(OptimError::Diverged {
                step,
                objective,
                bound: config.divergence_bound,
            });
        }
        optimizer.step(&mut params, &result.gradient)?;
        total_replays += result.replays;

        let report = coordination_report(&batch.trajectories, config.estimator)
            .map_err(|e| OptimError::InvalidConfig(e.to_string()))?;
        let rewards = batch.rewards.as_ref().expect("assigned");
        let planner_credit = rewards.iter().map(|r| r[0].r_marginal.as_f64()).sum::<f64>() / rewards.len() as f64;
        let row = TrainRow {
            step,
            objective,
            success: batch.success_rate(),
            planner_credit,
            harmful_fraction: report.harmful_fraction,
            useful_fraction: report.useful_fraction,
            replays: result.replays,
        };
        observe(&batch, &row);
        rows.push(row);
        wall_clock_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TrainOutcome {
        params,
        rows,
        wall_clock_ms,
        total_replays,
    })
}

/// [`train_with`] from uniform initial logits and sampled queries.
pub fn train<F: Real>(
    spec: &FactWorldSpec,
    config: &TrainConfig,
    weights: &RewardWeights,
) -> Result<TrainOutcome<F>, OptimError> {
    train_with(
        spec,
        config,
        weights,
        PolicyParams::for_world(spec),
        &QueryStream::Sampled,
        |_, _| {},
    )
}
