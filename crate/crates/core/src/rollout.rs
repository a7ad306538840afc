//! Group rollouts under a frozen policy snapshot.

use rayon::prelude::*;
use thiserror::Error;

use crate::env::{
    sample_query, EnvError, EpisodeState, FactWorldSpec, PlannerMove, PlannerOutcome, QueryInstance, Trajectory,
};
use crate::policy::{
    action_distribution, agent_logprob_sum, sample_action, PolicyError, PolicyParams, RoleContext, Snapshot,
};
use crate::reward::RewardBundle;
use crate::scalar::Real;
use crate::seed::{derive_seed, stream, DrawSource, RecordingRng, SeededStream, TraceReplay};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Seed of rollout `index` for `query_id` within a batch seeded by `base_seed`.
pub fn rollout_seed(base_seed: u64, query_id: u64, index: usize) -> u64 {
    derive_seed(&[stream::ROLLOUT, base_seed, query_id, index as u64])
}

/// Query for a batch, drawn from its own stream.
pub fn batch_query(spec: &FactWorldSpec, base_seed: u64) -> QueryInstance {
    sample_query(spec, &mut SeededStream::new(derive_seed(&[stream::QUERY, base_seed])))
}

fn drive<F: Real, D: DrawSource>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    query: QueryInstance,
    draws: &mut D,
) -> Result<EpisodeState, RolloutError> {
    let mut state = EpisodeState::new(query);
    while !state.is_terminal() {
        if !state.planner_budget_left(spec) {
            state.force_terminal();
            break;
        }
        let ctx = RoleContext::planner(state.planner_context(spec));
        let action = sample_action(&action_distribution(params, ctx)?, draws);
        let outcome = state.planner_step(spec, PlannerMove::from_action_id(spec, action))?;
        if let PlannerOutcome::Dispatched { .. } = outcome {
            while let Some((agent, bucket)) = state.active_worker(spec) {
                let tool = sample_action(&action_distribution(params, RoleContext::worker(bucket))?, draws);
                state.worker_tool_call(spec, agent, tool, draws)?;
            }
        }
    }
    Ok(state)
}

/// One episode: planner loop, each dispatched worker running until its
/// subtask is done or its step budget is spent.
pub fn run_episode<F: Real>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    query: QueryInstance,
    seed: u64,
) -> Result<Trajectory, RolloutError> {
    let mut rng = RecordingRng::new(seed);
    let state = drive(spec, params, query, &mut rng)?;
    Ok(state.finish(seed, rng.into_trace())?)
}

/// Re-run an episode from its recorded draws; errors unless the result is
/// identical to `traj`.
pub fn regenerate<F: Real>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    traj: &Trajectory,
) -> Result<Trajectory, RolloutError> {
    let mut replay = TraceReplay::new(&traj.rng_trace);
    let state = drive(spec, params, traj.query.clone(), &mut replay)?;
    if !replay.consumed_all() {
        return Err(EnvError::ReplayMismatch.into());
    }
    let again = state.finish(traj.seed, traj.rng_trace.clone())?;
    if &again != traj {
        return Err(EnvError::ReplayMismatch.into());
    }
    Ok(again)
}

/// G trajectories for one query plus everything computed from them.
#[derive(Clone, Debug)]
pub struct GroupBatch<F> {
    pub query: QueryInstance,
    pub base_seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub old_params: Snapshot<F>,
    /// `rewards[i][m]` for agent slot `m` of trajectory `i`.
    pub rewards: Option<Vec<Vec<RewardBundle<F>>>>,
    pub advantages: Option<Vec<Vec<F>>>,
}

impl<F: Real> GroupBatch<F> {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn header(&self) -> BatchHeader {
        BatchHeader {
            query_id: self.query.id,
            g: self.trajectories.len(),
            params_version: self.old_params.version(),
            base_seed: self.base_seed,
        }
    }

    pub fn success_rate(&self) -> f64 {
        let wins: usize = self.trajectories.iter().map(|t| t.r_acc as usize).sum();
        wins as f64 / self.trajectories.len().max(1) as f64
    }
}

/// Sample `g` rollouts of `query` under a snapshot of `params`.
///
/// Rollouts run in parallel on the current rayon pool; the batch is
/// assembled by index so the result does not depend on scheduling.
pub fn collect_group_for<F: Real>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    query: QueryInstance,
    g: usize,
    base_seed: u64,
) -> Result<GroupBatch<F>, RolloutError> {
    if g < 2 {
        return Err(RolloutError::GroupTooSmall(g));
    }
    params.check_layout(spec)?;
    let old_params = params.snapshot();
    let trajectories = (0..g)
        .into_par_iter()
        .map(|i| run_episode(spec, &old_params, query.clone(), rollout_seed(base_seed, query.id, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroupBatch {
        query,
        base_seed,
        trajectories,
        old_params,
        rewards: None,
        advantages: None,
    })
}

/// [`collect_group_for`] with the query drawn from `base_seed`.
pub fn collect_group<F: Real>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    g: usize,
    base_seed: u64,
) -> Result<GroupBatch<F>, RolloutError> {
    let query = batch_query(spec, base_seed);
    collect_group_for(spec, params, query, g, base_seed)
}

/// Outcome of evaluation-only rollouts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean planner actions plus tool calls per trajectory.
    pub mean_cost: f64,
    pub trajectories: Vec<Trajectory>,
}

/// `episodes` rollouts on fresh queries from the evaluation stream of `seed`.
pub fn evaluate<F: Real>(
    spec: &FactWorldSpec,
    params: &PolicyParams<F>,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary, RolloutError> {
    params.check_layout(spec)?;
    let trajectories = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let query = sample_query(spec, &mut SeededStream::new(derive_seed(&[stream::EVAL, seed, i, 0])));
            run_episode(spec, params, query, derive_seed(&[stream::EVAL, seed, i, 1]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = episodes.max(1) as f64;
    let wins: usize = trajectories.iter().map(|t| t.r_acc as usize).sum();
    let cost: usize = trajectories.iter().map(|t| t.action_count()).sum();
    Ok(EvalSummary {
        episodes,
        success_rate: wins as f64 / n,
        mean_cost: cost as f64 / n,
        trajectories,
    })
}

/// `log P_θ(τ)` up to the θ-independent tool terms: the sum of every
/// agent's own log-probabilities.
pub fn joint_logprob<F: Real>(
    params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    traj: &Trajectory,
) -> Result<F, PolicyError> {
    traj.agents()
        .into_iter()
        .try_fold(F::zero(), |acc, m| Ok(acc + agent_logprob_sum(params, spec, traj, m)?))
}

/// First line of a batch in a trajectory log.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchHeader {
    pub query_id: u64,
    pub g: usize,
    pub params_version: u64,
    pub base_seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::toy_spec;
    use crate::env::AgentId;

    fn stochastic_spec() -> FactWorldSpec {
        let mut spec = toy_spec();
        spec.tools[0].success = vec![0.6; 3];
        spec
    }

    #[test]
    fn group_size_precondition() {
        let spec = toy_spec();
        let p = PolicyParams::<f64>::for_world(&spec);
        assert_eq!(
            collect_group(&spec, &p, 1, 0).unwrap_err(),
            RolloutError::GroupTooSmall(1)
        );
    }

    #[test]
    fn deterministic_policy_gives_identical_rollouts() {
        let spec = toy_spec();
        let mut p = PolicyParams::<f64>::for_world(&spec);
        // planner: dispatch 0 at turn 0, dispatch 1 at turn 1, answer at turn 2
        let bucket = |turn: usize, missing: &[usize]| {
            spec.planner_bucket(turn, crate::env::FactSet::of(missing.iter().copied()))
        };
        let force = |p: &mut PolicyParams<f64>, ctx: RoleContext, a: usize, n: usize| {
            for b in 0..n {
                p.set_logit(ctx, b, if a == b { 0.0 } else { f64::NEG_INFINITY })
                    .unwrap();
            }
        };
        force(&mut p, RoleContext::planner(bucket(0, &[0, 1])), 0, 5);
        force(&mut p, RoleContext::planner(bucket(1, &[1])), 1, 5);
        force(&mut p, RoleContext::planner(bucket(2, &[])), 4, 5);
        for b in 0..spec.layout().worker_buckets {
            force(&mut p, RoleContext::worker(b), 0, 3);
        }
        let batch = collect_group(&spec, &p, 4, 11).unwrap();
        let first = &batch.trajectories[0];
        assert_eq!(first.r_acc, 1);
        assert_eq!(first.n_workers(), 2);
        for t in &batch.trajectories[1..] {
            assert_eq!(t.planner_trace, first.planner_trace);
            assert_eq!(t.worker_traces, first.worker_traces);
        }
    }

    #[test]
    fn batches_are_reproducible_and_streams_distinct() {
        let spec = stochastic_spec();
        let p = PolicyParams::<f64>::for_world(&spec);
        let a = collect_group(&spec, &p, 8, 123).unwrap();
        let b = collect_group(&spec, &p, 8, 123).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(a.trajectories[i].rng_trace[0], a.trajectories[j].rng_trace[0]);
            }
        }
        for (i, t) in a.trajectories.iter().enumerate() {
            assert_eq!(t.seed, rollout_seed(123, a.query.id, i));
        }
    }

    #[test]
    fn regenerate_from_trace() {
        let spec = stochastic_spec();
        let p = PolicyParams::<f64>::for_world(&spec);
        let batch = collect_group(&spec, &p, 4, 5).unwrap();
        for t in &batch.trajectories {
            assert_eq!(&regenerate(&spec, &p, t).unwrap(), t);
        }
        let mut tampered = batch.trajectories[0].clone();
        tampered.rng_trace[0] ^= 1 << 63;
        assert!(regenerate(&spec, &p, &tampered).is_err());
    }

    #[test]
    fn joint_logprob_factorizes() {
        let spec = stochastic_spec();
        let p = PolicyParams::<f64>::for_world(&spec);
        let batch = collect_group(&spec, &p, 4, 9).unwrap();
        for t in &batch.trajectories {
            let parts: f64 = t
                .agents()
                .into_iter()
                .map(|m| agent_logprob_sum(&p, &spec, t, m).unwrap())
                .sum();
            assert_eq!(joint_logprob(&p, &spec, t).unwrap(), parts);
        }
    }

    #[test]
    fn single_action_trajectory_logprob() {
        // planner with 4 actions answering at once
        let mut spec = toy_spec();
        spec.templates.truncate(3);
        let p = PolicyParams::<f64>::for_world(&spec);
        let mut st = EpisodeState::new(batch_query(&spec, 0));
        st.planner_step(&spec, PlannerMove::Answer(crate::env::Answer::Gathered))
            .unwrap();
        let t = st.finish(0, vec![]).unwrap();
        assert_eq!(t.agents(), vec![AgentId::PLANNER]);
        assert!((joint_logprob(&p, &spec, &t).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }
}
