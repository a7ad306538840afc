//! Broadcast accuracy, counterfactual marginal credit, tool-process reward,
//! and their weighted aggregate.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{counterfactual_replay, AgentId, EnvError, Role, Trajectory};
use crate::game::{CooperativeGame, GameError};
use crate::rollout::GroupBatch;
use crate::scalar::{Real, Scalar};
use crate::seed::{derive_seed, stream, DrawSource, SeededStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error("{0} is not a worker; planner credit comes from planner_credit")]
    NotAWorker(AgentId),
    #[error("batch has no rewards yet")]
    MissingRewards,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Mixing weights for the aggregate reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Scale of the planner's share of worker credit.
    pub lambda_planner: f64,
    /// Probability that a worker invocation gets counterfactual credit.
    pub sparsify_p: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 0.9,
            beta: 0.9,
            gamma: 0.1,
            lambda_planner: 1.0,
            sparsify_p: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_planner", self.lambda_planner),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RewardError::InvalidWeights(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.sparsify_p) {
            return Err(RewardError::InvalidWeights(format!(
                "sparsify_p must lie in [0, 1], got {}",
                self.sparsify_p
            )));
        }
        Ok(())
    }

    /// Broadcast-plus-tool baseline: same weights with `beta = 0`.
    pub fn broadcast_only(self) -> Self {
        RewardWeights { beta: 0.0, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBundle<F> {
    pub r_broadcast: F,
    pub r_marginal: F,
    pub r_tool: F,
    pub r_total: F,
}

/// `r_broadcast[i][m] = R_acc(τ_i)` for every agent slot `m` of trajectory `i`.
pub fn broadcast_reward<F: Real>(batch: &GroupBatch<F>) -> Vec<Vec<F>> {
    batch
        .trajectories
        .iter()
        .map(|t| vec![F::from_u8(t.r_acc).expect("0 or 1"); t.n_workers() + 1])
        .collect()
}

/// Mean validity over `agent`'s tool calls; 0 when it made none.
pub fn tool_process_reward<F: Real>(traj: &Trajectory, agent: AgentId) -> Result<F, RewardError> {
    let calls = traj.tool_calls(agent)?;
    if calls.is_empty() {
        return Ok(F::zero());
    }
    let sum = calls.iter().fold(F::zero(), |acc, c| acc + F::lit(c.validity));
    Ok(sum / F::from_count(calls.len()))
}

/// `R_acc(τ) − R_acc(τ without worker m)`, one counterfactual replay.
pub fn marginal_credit<F: Real>(traj: &Trajectory, agent: AgentId) -> Result<F, RewardError> {
    if agent.role != Role::Worker {
        return Err(RewardError::NotAWorker(agent));
    }
    traj.worker_trace(agent)?;
    let full = crate::game::Coalition::full(traj.n_workers() + 1);
    let without = counterfactual_replay(traj, full.without(agent.index()))?;
    Ok(F::from_i32(traj.r_acc as i32 - without as i32).expect("small integer"))
}

/// Same quantity read off a trajectory game.
pub fn marginal_credit_in_game<S: Scalar>(game: &CooperativeGame<S>, agent: AgentId) -> Result<S, RewardError> {
    if agent.role != Role::Worker {
        return Err(RewardError::NotAWorker(agent));
    }
    if agent.index() >= game.n_agents() {
        return Err(EnvError::NotParticipating(agent).into());
    }
    let full = game.grand_coalition();
    Ok(game.value(full) - game.value(full.without(agent.index())))
}

/// `λ · mean_m max(credit_m, 0)`; 0 with no workers.
pub fn planner_credit<F: Real>(worker_credits: &[F], lambda_planner: F) -> F {
    if worker_credits.is_empty() {
        return F::zero();
    }
    let positive = worker_credits.iter().fold(F::zero(), |acc, &c| acc + c.max(F::zero()));
    lambda_planner * positive / F::from_count(worker_credits.len())
}

/// Marginal credits after sparsification.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCredits<F> {
    /// `workers[i][k]` is the credit of worker slot `k + 1` in trajectory `i`.
    pub workers: Vec<Vec<F>>,
    pub planner: Vec<F>,
    pub selected: Vec<Vec<bool>>,
    /// Counterfactual replays performed.
    pub replays: usize,
}

/// Stream used for the sparsification draws of a batch.
pub fn sparsify_seed(base_seed: u64, query_id: u64) -> u64 {
    derive_seed(&[stream::SPARSIFY, base_seed, query_id])
}

/// Select each worker invocation independently with probability `p`;
/// selected ones get [`marginal_credit`], the rest 0. The planner's credit is
/// computed from the post-selection worker credits.
///
/// One draw is consumed per invocation regardless of `p`, so for a fixed
/// stream the selected set grows monotonically with `p`.
pub fn sparsified_credits<F: Real>(
    batch: &GroupBatch<F>,
    p: f64,
    lambda_planner: F,
    rng: &mut impl DrawSource,
) -> Result<SparseCredits<F>, RewardError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RewardError::InvalidWeights(format!(
            "sparsify_p must lie in [0, 1], got {p}"
        )));
    }
    let selected: Vec<Vec<bool>> = batch
        .trajectories
        .iter()
        .map(|t| (0..t.n_workers()).map(|_| rng.uniform() < p).collect())
        .collect();
    let workers = batch
        .trajectories
        .par_iter()
        .zip(&selected)
        .map(|(t, sel)| {
            sel.iter()
                .enumerate()
                .map(|(k, &on)| {
                    if on {
                        marginal_credit(t, AgentId::worker(k + 1))
                    } else {
                        Ok(F::zero())
                    }
                })
                .collect::<Result<Vec<F>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let planner = workers.iter().map(|c| planner_credit(c, lambda_planner)).collect();
    let replays = selected.iter().flatten().filter(|&&s| s).count();
    Ok(SparseCredits {
        workers,
        planner,
        selected,
        replays,
    })
}

/// `α·r_b + β·r_mc + γ·r_tool`.
pub fn aggregate<F: Real>(r_broadcast: F, r_marginal: F, r_tool: F, weights: &RewardWeights) -> F {
    F::lit(weights.alpha) * r_broadcast + F::lit(weights.beta) * r_marginal + F::lit(weights.gamma) * r_tool
}

/// Fill `batch.rewards`; returns the number of counterfactual replays.
///
/// Credits are skipped entirely when `beta = 0`, since they cannot affect
/// the aggregate; the broadcast baseline then costs no replays.
pub fn assign_rewards<F: Real>(batch: &mut GroupBatch<F>, weights: &RewardWeights) -> Result<usize, RewardError> {
    weights.validate()?;
    let broadcast = broadcast_reward(batch);
    let p = if weights.beta == 0.0 { 0.0 } else { weights.sparsify_p };
    let mut rng = SeededStream::new(sparsify_seed(batch.base_seed, batch.query.id));
    let credits = sparsified_credits(batch, p, F::lit(weights.lambda_planner), &mut rng)?;
    let mut rewards = Vec::with_capacity(batch.group_size());
    for (i, t) in batch.trajectories.iter().enumerate() {
        let row = t
            .agents()
            .into_iter()
            .map(|m| {
                let r_b = broadcast[i][m.index()];
                let r_mc = match m.role {
                    Role::Planner => credits.planner[i],
                    Role::Worker => credits.workers[i][m.index() - 1],
                };
                let r_tool = tool_process_reward(t, m)?;
                Ok(RewardBundle {
                    r_broadcast: r_b,
                    r_marginal: r_mc,
                    r_tool,
                    r_total: aggregate(r_b, r_mc, r_tool, weights),
                })
            })
            .collect::<Result<Vec<_>, RewardError>>()?;
        rewards.push(row);
    }
    batch.rewards = Some(rewards);
    Ok(credits.replays)
}

pub const REWARD_TABLE_HEADER: &str = "query,rollout,role,slot,r_broadcast,r_marginal,r_tool,r_total";

/// Append one CSV row per `(rollout, agent)` of a rewarded batch.
pub fn write_reward_rows<F: Real>(batch: &GroupBatch<F>, out: &mut String) -> Result<(), RewardError> {
    let rewards = batch.rewards.as_ref().ok_or(RewardError::MissingRewards)?;
    for (i, (t, row)) in batch.trajectories.iter().zip(rewards).enumerate() {
        for (m, r) in t.agents().into_iter().zip(row) {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?},{:?},{:?}",
                batch.query.id,
                i,
                m.role,
                m.slot,
                r.r_broadcast.as_f64(),
                r.r_marginal.as_f64(),
                r.r_tool.as_f64(),
                r.r_total.as_f64()
            );
        }
    }
    Ok(())
}
