//! FactWorld: a synthetic planner–worker environment with tools.
//!
//! A query asks for a set of required facts. The planner dispatches subtask
//! templates; each dispatch spawns a worker that calls tools, one call per
//! step, to retrieve the template's target facts. A poison tool may corrupt
//! (delete) a fact gathered earlier in the episode. The episode succeeds when
//! the surviving fact union covers the required facts and the planner's
//! answer matches it.
//!
//! Every event is recorded, so success can be recomputed with any subset of
//! agents deleted from the record ([`counterfactual_replay`]) without
//! re-sampling the environment.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::game::{Coalition, CooperativeGame, GameError};
use crate::scalar::Scalar;
use crate::seed::DrawSource;

/// Facts are `u32` bitmask positions.
pub const MAX_FACTS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("planner turn budget exhausted")]
    BudgetExhausted,
    #[error("episode already terminated")]
    Terminated,
    #[error("a worker is still running; the planner cannot act")]
    WorkerActive,
    #[error("no worker is running")]
    NoActiveWorker,
    #[error("agent {0} is not the active worker")]
    NotActiveWorker(AgentId),
    #[error("worker step budget exhausted")]
    WorkerBudgetExhausted,
    #[error("template {0} is not on the query menu")]
    UnknownTemplate(usize),
    #[error("trajectory is not terminal")]
    NotTerminal,
    #[error("coalition {0:?} names agents outside the trajectory")]
    UnknownAgents(Coalition),
    #[error("agent {0} did not participate in the trajectory")]
    NotParticipating(AgentId),
    #[error("replayed draws do not reproduce the trajectory")]
    ReplayMismatch,
}

/// Set of fact indices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct FactSet(u32);

impl FactSet {
    pub const EMPTY: FactSet = FactSet(0);

    pub fn from_mask(mask: u32) -> Self {
        FactSet(mask)
    }

    pub fn of<I: IntoIterator<Item = usize>>(facts: I) -> Self {
        facts.into_iter().fold(FactSet::EMPTY, |s, f| s.with(f))
    }

    pub fn single(fact: usize) -> Self {
        FactSet(1 << fact)
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn with(self, fact: usize) -> Self {
        FactSet(self.0 | (1 << fact))
    }

    pub fn contains(self, fact: usize) -> bool {
        fact < 32 && self.0 & (1 << fact) != 0
    }

    pub fn union(self, other: FactSet) -> FactSet {
        FactSet(self.0 | other.0)
    }

    pub fn intersect(self, other: FactSet) -> FactSet {
        FactSet(self.0 & other.0)
    }

    pub fn minus(self, other: FactSet) -> FactSet {
        FactSet(self.0 & !other.0)
    }

    pub fn is_superset(self, other: FactSet) -> bool {
        other.0 & !self.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let m = self.0;
        (0..32).filter(move |f| m & (1 << f) != 0)
    }
}

impl fmt::Debug for FactSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for FactSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for FactSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let facts = Vec::<usize>::deserialize(d)?;
        if let Some(&bad) = facts.iter().find(|&&f| f >= 32) {
            return Err(serde::de::Error::custom(format!("fact index {bad} out of range")));
        }
        Ok(FactSet::of(facts))
    }
}

/// How a query's required facts are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RequiredFacts {
    Fixed {
        facts: FactSet,
    },
    /// Uniformly random `k`-subset of all facts.
    UniformSubset {
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskTemplate {
    pub name: String,
    /// Facts this subtask retrieves; empty for decoys.
    pub target: FactSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    /// Success probability per fact, indexed by fact.
    pub success: Vec<f64>,
    /// Probability that a call deletes one previously gathered fact.
    #[serde(default)]
    pub corruption: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactWorldSpec {
    pub n_facts: usize,
    pub required: RequiredFacts,
    pub templates: Vec<SubtaskTemplate>,
    pub tools: Vec<ToolSpec>,
    pub planner_turn_budget: usize,
    pub worker_step_budget: usize,
}

impl FactWorldSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.n_facts == 0 || self.n_facts > MAX_FACTS {
            return bad(format!("n_facts must be in 1..={MAX_FACTS}, got {}", self.n_facts));
        }
        let all = FactSet::from_mask((1u32 << self.n_facts) - 1);
        match &self.required {
            RequiredFacts::Fixed { facts } => {
                if facts.is_empty() {
                    return bad("required facts must be nonempty".into());
                }
                if !all.is_superset(*facts) {
                    return bad(format!("required facts {facts:?} exceed n_facts"));
                }
            }
            RequiredFacts::UniformSubset { k } => {
                if *k == 0 || *k > self.n_facts {
                    return bad(format!("uniform subset size {k} must be in 1..={}", self.n_facts));
                }
            }
        }
        if self.templates.is_empty() {
            return bad("at least one subtask template is required".into());
        }
        for t in &self.templates {
            if !all.is_superset(t.target) {
                return bad(format!("template `{}` targets facts outside the world", t.name));
            }
        }
        if self.tools.is_empty() {
            return bad("at least one tool is required".into());
        }
        let mut poison = 0;
        for tool in &self.tools {
            if tool.success.len() != self.n_facts {
                return bad(format!(
                    "tool `{}` lists {} success probabilities for {} facts",
                    tool.name,
                    tool.success.len(),
                    self.n_facts
                ));
            }
            let probs = tool.success.iter().chain(std::iter::once(&tool.corruption));
            if probs.clone().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("tool `{}` has a probability outside [0, 1]", tool.name));
            }
            if tool.corruption > 0.0 {
                poison += 1;
            }
        }
        if poison > 1 {
            return bad("at most one tool may corrupt facts".into());
        }
        if self.planner_turn_budget == 0 || self.worker_step_budget == 0 {
            return bad("budgets must be at least 1".into());
        }
        Ok(())
    }

    pub fn all_facts(&self) -> FactSet {
        FactSet::from_mask((1u32 << self.n_facts) - 1)
    }

    /// Policy action index for "answer".
    pub fn answer_action(&self) -> usize {
        self.templates.len()
    }

    pub fn layout(&self) -> PolicyLayout {
        PolicyLayout {
            planner_buckets: self.planner_turn_budget << self.n_facts,
            planner_actions: self.templates.len() + 1,
            worker_buckets: self.templates.len() * self.worker_step_budget * 2,
            worker_actions: self.tools.len(),
        }
    }

    /// Context index for the planner at `turn` with `missing` required facts
    /// still absent from the surviving union.
    pub fn planner_bucket(&self, turn: usize, missing: FactSet) -> usize {
        (turn << self.n_facts) | missing.mask() as usize
    }

    /// Context index for a worker on `template` at `step`, given whether any
    /// fact has been gathered so far in the episode.
    pub fn worker_bucket(&self, template: usize, step: usize, union_nonempty: bool) -> usize {
        ((template * self.worker_step_budget + step) << 1) | union_nonempty as usize
    }
}

/// Shape of the logit tables a policy needs for a given world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub planner_buckets: usize,
    pub planner_actions: usize,
    pub worker_buckets: usize,
    pub worker_actions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Worker,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Planner => "planner",
            Role::Worker => "worker",
        })
    }
}

/// Planner is slot 0; workers occupy slots `1..=T` in dispatch order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId {
    pub role: Role,
    pub slot: usize,
}

impl AgentId {
    pub const PLANNER: AgentId = AgentId {
        role: Role::Planner,
        slot: 0,
    };

    pub fn worker(slot: usize) -> Self {
        debug_assert!(slot >= 1);
        AgentId {
            role: Role::Worker,
            slot,
        }
    }

    /// Agent index inside a trajectory game (equal to the slot).
    pub fn index(self) -> usize {
        self.slot
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.role, self.slot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryInstance {
    pub id: u64,
    pub required: FactSet,
    /// Template indices the planner may dispatch.
    pub menu: Vec<usize>,
}

pub fn sample_query(spec: &FactWorldSpec, rng: &mut impl DrawSource) -> QueryInstance {
    let id = rng.next_u64();
    let required = match &spec.required {
        RequiredFacts::Fixed { facts } => *facts,
        RequiredFacts::UniformSubset { k } => {
            // partial Fisher–Yates
            let mut pool: Vec<usize> = (0..spec.n_facts).collect();
            for i in 0..*k {
                let j = i + rng.index(pool.len() - i);
                pool.swap(i, j);
            }
            FactSet::of(pool[..*k].iter().copied())
        }
    };
    QueryInstance {
        id,
        required,
        menu: (0..spec.templates.len()).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    /// Assert whatever required facts survive in the gathered union. Under
    /// counterfactual masking the assertion tracks the masked union.
    Gathered,
    Explicit(FactSet),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMove {
    Dispatch(usize),
    Answer(Answer),
}

impl PlannerMove {
    pub fn action_id(self, spec: &FactWorldSpec) -> usize {
        match self {
            PlannerMove::Dispatch(t) => t,
            PlannerMove::Answer(_) => spec.answer_action(),
        }
    }

    pub fn from_action_id(spec: &FactWorldSpec, action: usize) -> Self {
        if action == spec.answer_action() {
            PlannerMove::Answer(Answer::Gathered)
        } else {
            PlannerMove::Dispatch(action)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerStep {
    pub turn: usize,
    pub context: usize,
    pub action: PlannerMove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCallRecord {
    pub agent: AgentId,
    pub step: usize,
    pub context: usize,
    pub tool: usize,
    /// Fact the call tried to retrieve (empty when nothing was left to fetch).
    pub target: FactSet,
    pub success: bool,
    pub granted: FactSet,
    pub corrupted: FactSet,
    pub validity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerTrace {
    pub slot: usize,
    pub template: usize,
    pub calls: Vec<ToolCallRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terminal {
    pub answer: Answer,
    /// Set when the turn budget ran out and the episode closed without a
    /// planner decision.
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub query: QueryInstance,
    pub seed: u64,
    pub planner_trace: Vec<PlannerStep>,
    pub worker_traces: Vec<WorkerTrace>,
    pub terminal: Option<Terminal>,
    pub r_acc: u8,
    pub rng_trace: Vec<u64>,
}

impl Trajectory {
    pub fn n_workers(&self) -> usize {
        self.worker_traces.len()
    }

    /// `{0} ∪ M_i` in slot order.
    pub fn agents(&self) -> Vec<AgentId> {
        std::iter::once(AgentId::PLANNER)
            .chain((1..=self.n_workers()).map(AgentId::worker))
            .collect()
    }

    pub fn participates(&self, agent: AgentId) -> bool {
        match agent.role {
            Role::Planner => agent.slot == 0,
            Role::Worker => agent.slot >= 1 && agent.slot <= self.n_workers(),
        }
    }

    pub fn worker_trace(&self, agent: AgentId) -> Result<&WorkerTrace, EnvError> {
        if agent.role != Role::Worker || !self.participates(agent) {
            return Err(EnvError::NotParticipating(agent));
        }
        Ok(&self.worker_traces[agent.slot - 1])
    }

    /// Tool calls made by `agent`; the planner makes none.
    pub fn tool_calls(&self, agent: AgentId) -> Result<&[ToolCallRecord], EnvError> {
        match agent.role {
            Role::Planner if agent.slot == 0 => Ok(&[]),
            Role::Planner => Err(EnvError::NotParticipating(agent)),
            Role::Worker => Ok(&self.worker_trace(agent)?.calls),
        }
    }

    /// `(context, action)` pairs chosen by `agent`'s policy, in order.
    pub fn agent_actions(&self, spec: &FactWorldSpec, agent: AgentId) -> Result<Vec<(usize, usize)>, EnvError> {
        match agent.role {
            Role::Planner if agent.slot == 0 => Ok(self
                .planner_trace
                .iter()
                .map(|s| (s.context, s.action.action_id(spec)))
                .collect()),
            Role::Planner => Err(EnvError::NotParticipating(agent)),
            Role::Worker => Ok(self
                .worker_trace(agent)?
                .calls
                .iter()
                .map(|c| (c.context, c.tool))
                .collect()),
        }
    }

    /// Planner actions plus worker tool calls.
    pub fn action_count(&self) -> usize {
        self.planner_trace.len() + self.worker_traces.iter().map(|w| w.calls.len()).sum::<usize>()
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ActiveWorker {
    slot: usize,
    template: usize,
    step: usize,
    own: FactSet,
}

/// Outcome of a planner move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannerOutcome {
    /// A worker now occupies `agent` and must run its subtask over `target`.
    Dispatched {
        agent: AgentId,
        target: FactSet,
    },
    Terminal,
}

/// An episode in progress.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    query: QueryInstance,
    planner_trace: Vec<PlannerStep>,
    worker_traces: Vec<WorkerTrace>,
    active: Option<ActiveWorker>,
    gathered: FactSet,
    terminal: Option<Terminal>,
}

impl EpisodeState {
    pub fn new(query: QueryInstance) -> Self {
        EpisodeState {
            query,
            planner_trace: Vec::new(),
            worker_traces: Vec::new(),
            active: None,
            gathered: FactSet::EMPTY,
            terminal: None,
        }
    }

    pub fn query(&self) -> &QueryInstance {
        &self.query
    }

    /// Surviving fact union so far.
    pub fn gathered(&self) -> FactSet {
        self.gathered
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn planner_budget_left(&self, spec: &FactWorldSpec) -> bool {
        self.planner_trace.len() < spec.planner_turn_budget
    }

    pub fn planner_context(&self, spec: &FactWorldSpec) -> usize {
        let missing = self.query.required.minus(self.gathered);
        spec.planner_bucket(self.planner_trace.len(), missing)
    }

    /// Active worker and its context, if one is running.
    pub fn active_worker(&self, spec: &FactWorldSpec) -> Option<(AgentId, usize)> {
        self.active.map(|w| {
            (
                AgentId::worker(w.slot),
                spec.worker_bucket(w.template, w.step, !self.gathered.is_empty()),
            )
        })
    }

    /// Apply a planner move. With the turn budget spent, any move closes the
    /// episode with [`Answer::Gathered`] and is not recorded.
    pub fn planner_step(&mut self, spec: &FactWorldSpec, action: PlannerMove) -> Result<PlannerOutcome, EnvError> {
        if self.terminal.is_some() {
            return Err(EnvError::Terminated);
        }
        if self.active.is_some() {
            return Err(EnvError::WorkerActive);
        }
        if !self.planner_budget_left(spec) {
            self.force_terminal();
            return Ok(PlannerOutcome::Terminal);
        }
        if let PlannerMove::Dispatch(t) = action {
            if !self.query.menu.contains(&t) || t >= spec.templates.len() {
                return Err(EnvError::UnknownTemplate(t));
            }
        }
        let step = PlannerStep {
            turn: self.planner_trace.len(),
            context: self.planner_context(spec),
            action,
        };
        self.planner_trace.push(step);
        match action {
            PlannerMove::Dispatch(template) => {
                let slot = self.worker_traces.len() + 1;
                self.worker_traces.push(WorkerTrace {
                    slot,
                    template,
                    calls: Vec::new(),
                });
                self.active = Some(ActiveWorker {
                    slot,
                    template,
                    step: 0,
                    own: FactSet::EMPTY,
                });
                Ok(PlannerOutcome::Dispatched {
                    agent: AgentId::worker(slot),
                    target: spec.templates[template].target,
                })
            }
            PlannerMove::Answer(answer) => {
                self.terminal = Some(Terminal { answer, forced: false });
                Ok(PlannerOutcome::Terminal)
            }
        }
    }

    /// Close the episode without a planner decision.
    pub fn force_terminal(&mut self) {
        self.active = None;
        if self.terminal.is_none() {
            self.terminal = Some(Terminal {
                answer: Answer::Gathered,
                forced: true,
            });
        }
    }

    /// One tool invocation by the active worker.
    ///
    /// An out-of-menu tool id is recorded as a no-op with validity 0. Once
    /// the worker has retrieved its whole target, or spent its step budget,
    /// it is released and the planner resumes.
    pub fn worker_tool_call(
        &mut self,
        spec: &FactWorldSpec,
        agent: AgentId,
        tool: usize,
        rng: &mut impl DrawSource,
    ) -> Result<ToolCallRecord, EnvError> {
        if self.terminal.is_some() {
            return Err(EnvError::Terminated);
        }
        let Some(mut w) = self.active else {
            return Err(EnvError::NoActiveWorker);
        };
        if agent != AgentId::worker(w.slot) {
            return Err(EnvError::NotActiveWorker(agent));
        }
        if w.step >= spec.worker_step_budget {
            return Err(EnvError::WorkerBudgetExhausted);
        }
        let context = spec.worker_bucket(w.template, w.step, !self.gathered.is_empty());
        let target = spec.templates[w.template]
            .target
            .minus(w.own)
            .first()
            .map(FactSet::single)
            .unwrap_or(FactSet::EMPTY);
        let mut record = ToolCallRecord {
            agent,
            step: w.step,
            context,
            tool,
            target,
            success: false,
            granted: FactSet::EMPTY,
            corrupted: FactSet::EMPTY,
            validity: 0.0,
        };
        if let Some(spec_tool) = spec.tools.get(tool) {
            if spec_tool.corruption > 0.0 && rng.uniform() < spec_tool.corruption {
                let pool: Vec<usize> = self.gathered.iter().collect();
                if !pool.is_empty() {
                    let victim = pool[rng.index(pool.len())];
                    record.corrupted = FactSet::single(victim);
                    self.gathered = self.gathered.minus(record.corrupted);
                }
            }
            if let Some(fact) = target.first() {
                if rng.uniform() < spec_tool.success[fact] {
                    record.success = true;
                    record.granted = target;
                    self.gathered = self.gathered.union(target);
                    w.own = w.own.union(target);
                }
            }
            record.validity = if record.success { 1.0 } else { 0.0 };
        } else {
            record.target = FactSet::EMPTY;
        }
        self.worker_traces[w.slot - 1].calls.push(record.clone());
        w.step += 1;
        let goal = spec.templates[w.template].target;
        let finished = (!goal.is_empty() && w.own.is_superset(goal)) || w.step >= spec.worker_step_budget;
        self.active = if finished { None } else { Some(w) };
        Ok(record)
    }

    /// Seal the episode into a trajectory. Errors if it has not terminated.
    pub fn finish(self, seed: u64, rng_trace: Vec<u64>) -> Result<Trajectory, EnvError> {
        if self.terminal.is_none() {
            return Err(EnvError::NotTerminal);
        }
        let mut traj = Trajectory {
            query: self.query,
            seed,
            planner_trace: self.planner_trace,
            worker_traces: self.worker_traces,
            terminal: self.terminal,
            r_acc: 0,
            rng_trace,
        };
        traj.r_acc = terminal_accuracy(&traj)?;
        Ok(traj)
    }
}

/// Replay grants and corruptions of the agents in `keep`, in record order.
fn surviving_union(traj: &Trajectory, keep: impl Fn(usize) -> bool) -> FactSet {
    let mut union = FactSet::EMPTY;
    for w in &traj.worker_traces {
        if !keep(w.slot) {
            continue;
        }
        for call in &w.calls {
            union = union.minus(call.corrupted).union(call.granted);
        }
    }
    union
}

fn accuracy_of(traj: &Trajectory, terminal: &Terminal, union: FactSet) -> u8 {
    let required = traj.query.required;
    let truth = union.intersect(required);
    let answer = match terminal.answer {
        Answer::Gathered => truth,
        Answer::Explicit(s) => s,
    };
    (union.is_superset(required) && answer == truth) as u8
}

/// Binary success of a finished trajectory.
pub fn terminal_accuracy(traj: &Trajectory) -> Result<u8, EnvError> {
    let terminal = traj.terminal.as_ref().ok_or(EnvError::NotTerminal)?;
    Ok(accuracy_of(traj, terminal, surviving_union(traj, |_| true)))
}

/// Success of the trajectory with every record of agents outside `coalition`
/// deleted. Recorded outcomes of the remaining agents are kept verbatim.
/// Without the planner (slot 0) the value is 0.
pub fn counterfactual_replay(traj: &Trajectory, coalition: Coalition) -> Result<u8, EnvError> {
    let terminal = traj.terminal.as_ref().ok_or(EnvError::NotTerminal)?;
    if !coalition.within(traj.n_workers() + 1) {
        return Err(EnvError::UnknownAgents(coalition));
    }
    if !coalition.contains(0) {
        return Ok(0);
    }
    let union = surviving_union(traj, |slot| coalition.contains(slot));
    Ok(accuracy_of(traj, terminal, union))
}

/// Cooperative game over `{planner} ∪ workers` valued by counterfactual replay.
pub fn trajectory_game<S: Scalar>(traj: &Trajectory) -> Result<CooperativeGame<S>, EnvError> {
    if !traj.is_terminal() {
        return Err(EnvError::NotTerminal);
    }
    let n = traj.n_workers() + 1;
    let owned = traj.clone();
    CooperativeGame::memoized(n, move |c| {
        S::from_count(counterfactual_replay(&owned, c).expect("coalition within game") as usize)
    })
    .map_err(|e: GameError| EnvError::InvalidSpec(e.to_string()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::seed::{RecordingRng, SeededStream};

    /// Two facts, one template per fact plus a decoy; tool 0 always works,
    /// tool 1 never does, tool 2 always works and always corrupts.
    pub(crate) fn toy_spec() -> FactWorldSpec {
        FactWorldSpec {
            n_facts: 3,
            required: RequiredFacts::Fixed {
                facts: FactSet::of([0, 1]),
            },
            templates: vec![
                SubtaskTemplate {
                    name: "f0".into(),
                    target: FactSet::single(0),
                },
                SubtaskTemplate {
                    name: "f1".into(),
                    target: FactSet::single(1),
                },
                SubtaskTemplate {
                    name: "f2".into(),
                    target: FactSet::single(2),
                },
                SubtaskTemplate {
                    name: "decoy".into(),
                    target: FactSet::EMPTY,
                },
            ],
            tools: vec![
                ToolSpec {
                    name: "search".into(),
                    success: vec![1.0; 3],
                    corruption: 0.0,
                },
                ToolSpec {
                    name: "noop".into(),
                    success: vec![0.0; 3],
                    corruption: 0.0,
                },
                ToolSpec {
                    name: "poison".into(),
                    success: vec![1.0; 3],
                    corruption: 1.0,
                },
            ],
            planner_turn_budget: 4,
            worker_step_budget: 2,
        }
    }

    fn query(spec: &FactWorldSpec) -> QueryInstance {
        sample_query(spec, &mut SeededStream::new(0))
    }

    /// Dispatch each template with the given tool sequence, then answer.
    pub(crate) fn scripted(spec: &FactWorldSpec, plan: &[(usize, &[usize])]) -> Trajectory {
        let mut rng = RecordingRng::new(9);
        let mut st = EpisodeState::new(query(spec));
        for &(template, tools) in plan {
            let PlannerOutcome::Dispatched { agent, .. } =
                st.planner_step(spec, PlannerMove::Dispatch(template)).unwrap()
            else {
                panic!("expected dispatch");
            };
            for &tool in tools {
                st.worker_tool_call(spec, agent, tool, &mut rng).unwrap();
            }
            assert!(st.active_worker(spec).is_none(), "worker should be released");
        }
        st.planner_step(spec, PlannerMove::Answer(Answer::Gathered)).unwrap();
        st.finish(9, rng.into_trace()).unwrap()
    }

    #[test]
    fn spec_validation() {
        let spec = toy_spec();
        assert!(spec.validate().is_ok());
        let mut bad = spec.clone();
        bad.required = RequiredFacts::Fixed { facts: FactSet::EMPTY };
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.tools[0].success[1] = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = spec.clone();
        bad.tools[0].corruption = 0.1;
        assert!(bad.validate().is_err(), "two poison tools");
        let mut bad = spec.clone();
        bad.worker_step_budget = 0;
        assert!(bad.validate().is_err());
        let mut bad = spec;
        bad.templates[0].target = FactSet::single(5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_query_and_determinism() {
        let spec = toy_spec();
        let q = query(&spec);
        assert_eq!(q.required, FactSet::of([0, 1]));
        assert_eq!(q, query(&spec));
        assert_eq!(q.menu, vec![0, 1, 2, 3]);
    }

    #[test]
    fn uniform_pairs_are_equally_likely() {
        let mut spec = toy_spec();
        spec.n_facts = 4;
        spec.required = RequiredFacts::UniformSubset { k: 2 };
        for t in &mut spec.tools {
            t.success = vec![1.0; 4];
        }
        let mut rng = SeededStream::new(77);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            let q = sample_query(&spec, &mut rng);
            assert_eq!(q.required.len(), 2);
            *counts.entry(q.required).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn dispatch_opens_slot_and_answer_terminates() {
        let spec = toy_spec();
        let mut st = EpisodeState::new(query(&spec));
        let out = st.planner_step(&spec, PlannerMove::Dispatch(0)).unwrap();
        assert_eq!(
            out,
            PlannerOutcome::Dispatched {
                agent: AgentId::worker(1),
                target: FactSet::single(0)
            }
        );
        assert_eq!(
            st.planner_step(&spec, PlannerMove::Dispatch(1)),
            Err(EnvError::WorkerActive)
        );
        let traj = scripted(&spec, &[(0, &[0]), (1, &[0])]);
        assert_eq!(traj.n_workers(), 2);
        assert_eq!(traj.r_acc, 1);
        assert_eq!(terminal_accuracy(&traj), Ok(1));
    }

    #[test]
    fn explicit_answer_must_match() {
        let spec = toy_spec();
        let mut rng = RecordingRng::new(1);
        let mut st = EpisodeState::new(query(&spec));
        for t in [0, 1] {
            st.planner_step(&spec, PlannerMove::Dispatch(t)).unwrap();
            st.worker_tool_call(&spec, AgentId::worker(t + 1), 0, &mut rng).unwrap();
        }
        let mut right = st.clone();
        right
            .planner_step(&spec, PlannerMove::Answer(Answer::Explicit(FactSet::of([0, 1]))))
            .unwrap();
        assert_eq!(right.finish(1, vec![]).unwrap().r_acc, 1);
        st.planner_step(&spec, PlannerMove::Answer(Answer::Explicit(FactSet::of([0]))))
            .unwrap();
        assert_eq!(st.finish(1, vec![]).unwrap().r_acc, 0);
    }

    #[test]
    fn budget_exhaustion_forces_terminal() {
        let mut spec = toy_spec();
        spec.planner_turn_budget = 1;
        let mut st = EpisodeState::new(query(&spec));
        let mut rng = RecordingRng::new(2);
        st.planner_step(&spec, PlannerMove::Dispatch(0)).unwrap();
        st.worker_tool_call(&spec, AgentId::worker(1), 0, &mut rng).unwrap();
        assert_eq!(
            st.planner_step(&spec, PlannerMove::Dispatch(1)),
            Ok(PlannerOutcome::Terminal)
        );
        let traj = st.finish(2, vec![]).unwrap();
        assert_eq!(traj.planner_trace.len(), 1);
        assert!(traj.terminal.unwrap().forced);
        assert_eq!(traj.r_acc, 0);
    }

    #[test]
    fn tool_call_semantics() {
        let spec = toy_spec();
        let mut rng = RecordingRng::new(3);
        let mut st = EpisodeState::new(query(&spec));
        st.planner_step(&spec, PlannerMove::Dispatch(2)).unwrap();
        let rec = st.worker_tool_call(&spec, AgentId::worker(1), 0, &mut rng).unwrap();
        assert_eq!(rec.granted, FactSet::single(2));
        assert_eq!(rec.validity, 1.0);

        st.planner_step(&spec, PlannerMove::Dispatch(0)).unwrap();
        let w = AgentId::worker(2);
        assert_eq!(
            st.worker_tool_call(&spec, AgentId::worker(1), 0, &mut rng),
            Err(EnvError::NotActiveWorker(AgentId::worker(1)))
        );
        let noop = st.worker_tool_call(&spec, w, 1, &mut rng).unwrap();
        assert_eq!(noop.granted, FactSet::EMPTY);
        assert_eq!(noop.validity, 0.0);
        let malformed = st.worker_tool_call(&spec, w, 99, &mut rng).unwrap();
        assert_eq!(malformed.validity, 0.0);
        assert_eq!(malformed.granted, FactSet::EMPTY);
        assert!(st.active_worker(&spec).is_none(), "budget of 2 spent");
    }

    #[test]
    fn bernoulli_tool_success_rate() {
        let mut spec = toy_spec();
        spec.tools[0].success = vec![0.5; 3];
        spec.worker_step_budget = 1;
        spec.planner_turn_budget = 10_000;
        let mut rng = RecordingRng::new(5);
        let mut st = EpisodeState::new(query(&spec));
        let n = 10_000;
        let mut hits = 0;
        for i in 0..n {
            st.planner_step(&spec, PlannerMove::Dispatch(0)).unwrap();
            let rec = st.worker_tool_call(&spec, AgentId::worker(i + 1), 0, &mut rng).unwrap();
            hits += rec.success as usize;
        }
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.015);
    }

    #[test]
    fn accuracy_predicate_cases() {
        let spec = toy_spec();
        assert_eq!(scripted(&spec, &[(0, &[0]), (1, &[0])]).r_acc, 1);
        // poison on fact 2 corrupts something gathered earlier
        let t = scripted(&spec, &[(0, &[0]), (1, &[0]), (2, &[2])]);
        assert_eq!(t.worker_traces[2].calls[0].corrupted.len(), 1);
        assert_eq!(t.r_acc, 0);
        // planner answers immediately
        let t = scripted(&spec, &[]);
        assert_eq!(t.r_acc, 0);
        let mut open = t.clone();
        open.terminal = None;
        assert_eq!(terminal_accuracy(&open), Err(EnvError::NotTerminal));
    }

    #[test]
    fn replay_masks() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[0]), (1, &[0]), (2, &[2])]);
        let full = Coalition::full(4);
        assert_eq!(counterfactual_replay(&t, full), Ok(t.r_acc));
        // drop the poison worker: success is restored
        assert_eq!(counterfactual_replay(&t, full.without(3)), Ok(1));
        // drop the planner
        assert_eq!(counterfactual_replay(&t, full.without(0)), Ok(0));
        assert_eq!(
            counterfactual_replay(&t, Coalition::full(5)),
            Err(EnvError::UnknownAgents(Coalition::full(5)))
        );

        let ok = scripted(&spec, &[(0, &[0]), (1, &[0])]);
        assert_eq!(counterfactual_replay(&ok, Coalition::full(3).without(1)), Ok(0));
    }

    #[test]
    fn one_worker_game_masks_planner() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[0])]);
        let g = trajectory_game::<f64>(&t).unwrap();
        assert_eq!(g.n_agents(), 2);
        assert_eq!(g.value(Coalition::EMPTY), 0.0);
        assert_eq!(g.value(Coalition::from_members([1])), 0.0);
        assert_eq!(g.value(g.grand_coalition()), t.r_acc as f64);
    }
}
