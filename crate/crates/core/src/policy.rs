//! Shared tabular softmax policy with role-conditioned rows.
//!
//! One parameter store holds a logit table per role. A [`RoleContext`]
//! selects a row; the planner and workers never share rows, so an update to
//! one role cannot move the other role's action probabilities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::env::{AgentId, EnvError, FactWorldSpec, PolicyLayout, Role, Trajectory};
use crate::scalar::Real;
use crate::seed::DrawSource;

pub const CHECKPOINT_MAGIC: &str = "sharp-policy-checkpoint v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("{role} context {bucket} out of bounds (limit {limit})")]
    ContextOutOfBounds { role: Role, bucket: usize, limit: usize },
    #[error("{role} action {action} out of bounds (limit {limit})")]
    ActionOutOfBounds { role: Role, action: usize, limit: usize },
    #[error("no legal action in {role} context {bucket}")]
    NoLegalAction { role: Role, bucket: usize },
    #[error("policy layout {got:?} does not match world layout {expected:?}")]
    LayoutMismatch { got: PolicyLayout, expected: PolicyLayout },
    #[error("non-finite logit in {role} row {bucket}")]
    NonFinite { role: Role, bucket: usize },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoleContext {
    pub role: Role,
    pub bucket: usize,
}

impl RoleContext {
    pub fn planner(bucket: usize) -> Self {
        RoleContext {
            role: Role::Planner,
            bucket,
        }
    }

    pub fn worker(bucket: usize) -> Self {
        RoleContext {
            role: Role::Worker,
            bucket,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LogitTable<F> {
    buckets: usize,
    actions: usize,
    data: Vec<F>,
}

impl<F: Real> LogitTable<F> {
    fn zeros(buckets: usize, actions: usize) -> Self {
        LogitTable {
            buckets,
            actions,
            data: vec![F::zero(); buckets * actions],
        }
    }

    fn row(&self, bucket: usize) -> &[F] {
        &self.data[bucket * self.actions..(bucket + 1) * self.actions]
    }

    fn row_mut(&mut self, bucket: usize) -> &mut [F] {
        &mut self.data[bucket * self.actions..(bucket + 1) * self.actions]
    }
}

/// Logits for every `(role, bucket, action)`, plus an update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<F> {
    layout: PolicyLayout,
    planner: LogitTable<F>,
    worker: LogitTable<F>,
    version: u64,
}

/// Frozen copy used as the behaviour policy for a batch.
pub type Snapshot<F> = Arc<PolicyParams<F>>;

impl<F: Real> PolicyParams<F> {
    /// All-zero logits: uniform over every row.
    pub fn zeros(layout: PolicyLayout) -> Self {
        PolicyParams {
            layout,
            planner: LogitTable::zeros(layout.planner_buckets, layout.planner_actions),
            worker: LogitTable::zeros(layout.worker_buckets, layout.worker_actions),
            version: 0,
        }
    }

    pub fn for_world(spec: &FactWorldSpec) -> Self {
        Self::zeros(spec.layout())
    }

    pub fn layout(&self) -> PolicyLayout {
        self.layout
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn snapshot(&self) -> Snapshot<F> {
        Arc::new(self.clone())
    }

    pub fn check_layout(&self, spec: &FactWorldSpec) -> Result<(), PolicyError> {
        if self.layout != spec.layout() {
            return Err(PolicyError::LayoutMismatch {
                got: self.layout,
                expected: spec.layout(),
            });
        }
        Ok(())
    }

    fn table(&self, role: Role) -> &LogitTable<F> {
        match role {
            Role::Planner => &self.planner,
            Role::Worker => &self.worker,
        }
    }

    fn table_mut(&mut self, role: Role) -> &mut LogitTable<F> {
        match role {
            Role::Planner => &mut self.planner,
            Role::Worker => &mut self.worker,
        }
    }

    pub fn n_actions(&self, role: Role) -> usize {
        self.table(role).actions
    }

    pub fn n_buckets(&self, role: Role) -> usize {
        self.table(role).buckets
    }

    pub fn row(&self, ctx: RoleContext) -> Result<&[F], PolicyError> {
        let t = self.table(ctx.role);
        if ctx.bucket >= t.buckets {
            return Err(PolicyError::ContextOutOfBounds {
                role: ctx.role,
                bucket: ctx.bucket,
                limit: t.buckets,
            });
        }
        Ok(t.row(ctx.bucket))
    }

    pub fn logit(&self, ctx: RoleContext, action: usize) -> Result<F, PolicyError> {
        let row = self.row(ctx)?;
        row.get(action).copied().ok_or(PolicyError::ActionOutOfBounds {
            role: ctx.role,
            action,
            limit: row.len(),
        })
    }

    pub fn set_logit(&mut self, ctx: RoleContext, action: usize, value: F) -> Result<(), PolicyError> {
        self.logit(ctx, action)?;
        self.table_mut(ctx.role).row_mut(ctx.bucket)[action] = value;
        Ok(())
    }

    /// `θ ← θ + step · g`, bumping the version.
    pub fn apply(&mut self, grad: &SparseGrad<F>, step: F) -> Result<(), PolicyError> {
        for (&(role, bucket), g) in &grad.rows {
            let ctx = RoleContext { role, bucket };
            self.row(ctx)?;
            let row = self.table_mut(role).row_mut(bucket);
            for (theta, &gi) in row.iter_mut().zip(g) {
                *theta += step * gi;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Overwrite logits from a dense flat vector (planner rows, then worker rows).
    pub fn set_flat(&mut self, flat: &[F]) {
        let np = self.planner.data.len();
        self.planner.data.copy_from_slice(&flat[..np]);
        self.worker.data.copy_from_slice(&flat[np..]);
    }

    pub fn flat(&self) -> Vec<F> {
        self.planner.data.iter().chain(&self.worker.data).copied().collect()
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn check_finite(&self) -> Result<(), PolicyError> {
        for role in [Role::Planner, Role::Worker] {
            let t = self.table(role);
            for b in 0..t.buckets {
                if t.row(b).iter().any(|x| !x.is_finite()) {
                    return Err(PolicyError::NonFinite { role, bucket: b });
                }
            }
        }
        Ok(())
    }

    /// Serialize to the line-oriented checkpoint format.
    ///
    /// ```text
    /// sharp-policy-checkpoint v1
    /// version <n>
    /// layout <planner_buckets> <planner_actions> <worker_buckets> <worker_actions>
    /// <role> <bucket> <action> <logit>      one line per entry
    /// ```
    pub fn to_checkpoint(&self) -> String {
        let l = self.layout;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "version {}", self.version);
        let _ = writeln!(
            out,
            "layout {} {} {} {}",
            l.planner_buckets, l.planner_actions, l.worker_buckets, l.worker_actions
        );
        for role in [Role::Planner, Role::Worker] {
            let t = self.table(role);
            for b in 0..t.buckets {
                for (a, x) in t.row(b).iter().enumerate() {
                    let _ = writeln!(out, "{role} {b} {a} {:?}", x.to_f64().unwrap_or(f64::NAN));
                }
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PolicyError> {
        let err = |line: usize, message: String| PolicyError::Checkpoint { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };
        let (n, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err(n, format!("expected `{CHECKPOINT_MAGIC}`")));
        }
        let (n, version) = next("version")?;
        let version = version
            .strip_prefix("version ")
            .and_then(|v| v.parse::<u64>().ok())
            .ok_or_else(|| err(n, "expected `version <n>`".into()))?;
        let (n, layout) = next("layout")?;
        let dims: Vec<usize> = layout
            .strip_prefix("layout ")
            .map(|rest| rest.split_whitespace().filter_map(|d| d.parse().ok()).collect())
            .unwrap_or_default();
        let [pb, pa, wb, wa] = dims[..] else {
            return Err(err(n, "expected `layout <pb> <pa> <wb> <wa>`".into()));
        };
        let layout = PolicyLayout {
            planner_buckets: pb,
            planner_actions: pa,
            worker_buckets: wb,
            worker_actions: wa,
        };
        let mut params = PolicyParams::<F>::zeros(layout);
        params.version = version;
        let total = pb * pa + wb * wa;
        let mut seen = 0usize;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [role, b, a, x] = parts[..] else {
                return Err(err(
                    n,
                    format!("expected `<role> <bucket> <action> <logit>`, found `{line}`"),
                ));
            };
            let role = match role {
                "planner" => Role::Planner,
                "worker" => Role::Worker,
                other => return Err(err(n, format!("unknown role `{other}`"))),
            };
            let parse_idx = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("bad index `{s}`: {e}")));
            let (b, a) = (parse_idx(b)?, parse_idx(a)?);
            let x: f64 = x.parse().map_err(|e| err(n, format!("bad logit `{x}`: {e}")))?;
            if !x.is_finite() {
                return Err(err(n, "logit is not finite".into()));
            }
            params
                .set_logit(RoleContext { role, bucket: b }, a, F::lit(x))
                .map_err(|e| err(n, e.to_string()))?;
            seen += 1;
        }
        if seen != total {
            return Err(err(0, format!("expected {total} entries, found {seen}")));
        }
        Ok(params)
    }
}

/// Softmax over a row (max-shifted).
pub fn softmax<F: Real>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at<F: Real>(row: &[F], action: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum = row.iter().map(|&x| (x - max).exp()).fold(F::zero(), |a, b| a + b);
    row[action] - max - sum.ln()
}

/// Action probabilities in `ctx`; every action of the role is legal.
pub fn action_distribution<F: Real>(params: &PolicyParams<F>, ctx: RoleContext) -> Result<Vec<F>, PolicyError> {
    Ok(softmax(params.row(ctx)?))
}

/// Softmax restricted to `legal`; illegal actions get probability 0.
pub fn masked_action_distribution<F: Real>(
    params: &PolicyParams<F>,
    ctx: RoleContext,
    legal: &[bool],
) -> Result<Vec<F>, PolicyError> {
    let row = params.row(ctx)?;
    if legal.len() != row.len() {
        return Err(PolicyError::ActionOutOfBounds {
            role: ctx.role,
            action: legal.len(),
            limit: row.len(),
        });
    }
    let kept: Vec<F> = row.iter().zip(legal).filter(|(_, &l)| l).map(|(&x, _)| x).collect();
    if kept.is_empty() {
        return Err(PolicyError::NoLegalAction {
            role: ctx.role,
            bucket: ctx.bucket,
        });
    }
    let mut probs = softmax(&kept).into_iter();
    Ok(legal
        .iter()
        .map(|&l| {
            if l {
                probs.next().expect("one per legal")
            } else {
                F::zero()
            }
        })
        .collect())
}

/// Inverse-CDF sampling.
pub fn sample_action<F: Real>(dist: &[F], rng: &mut impl DrawSource) -> usize {
    let u = F::lit(rng.uniform());
    let mut cum = F::zero();
    for (a, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return a;
        }
    }
    // rounding left `cum` just below 1: take the last action with mass
    dist.iter()
        .rposition(|&p| p > F::zero())
        .unwrap_or(dist.len().saturating_sub(1))
}

fn role_context(agent: AgentId, bucket: usize) -> RoleContext {
    RoleContext {
        role: agent.role,
        bucket,
    }
}

/// `Σ_j log π(a_j | ctx_j)` over `agent`'s own actions in `traj`.
pub fn agent_logprob_sum<F: Real>(
    params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    traj: &Trajectory,
    agent: AgentId,
) -> Result<F, PolicyError> {
    let mut total = F::zero();
    for (bucket, action) in traj.agent_actions(spec, agent)? {
        let ctx = role_context(agent, bucket);
        params.logit(ctx, action)?;
        total += log_softmax_at(params.row(ctx)?, action);
    }
    Ok(total)
}

/// Gradient restricted to visited rows, keyed by `(role, bucket)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<F> {
    pub rows: BTreeMap<(Role, usize), Vec<F>>,
}

impl<F: Real> Default for SparseGrad<F> {
    fn default() -> Self {
        SparseGrad { rows: BTreeMap::new() }
    }
}

impl<F: Real> SparseGrad<F> {
    pub fn get(&self, ctx: RoleContext, action: usize) -> F {
        self.rows
            .get(&(ctx.role, ctx.bucket))
            .and_then(|r| r.get(action).copied())
            .unwrap_or_else(F::zero)
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &SparseGrad<F>, scale: F) {
        for (key, row) in &other.rows {
            let dst = self.rows.entry(*key).or_insert_with(|| vec![F::zero(); row.len()]);
            for (d, &g) in dst.iter_mut().zip(row) {
                *d += scale * g;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for row in self.rows.values_mut() {
            for g in row.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|g| g.is_zero())
    }

    pub fn max_abs(&self) -> F {
        self.rows.values().flatten().fold(F::zero(), |m, g| m.max(g.abs()))
    }

    /// Dense flat layout matching [`PolicyParams::flat`].
    pub fn to_flat(&self, layout: PolicyLayout) -> Vec<F> {
        let np = layout.planner_buckets * layout.planner_actions;
        let mut flat = vec![F::zero(); np + layout.worker_buckets * layout.worker_actions];
        for (&(role, bucket), row) in &self.rows {
            let (offset, width) = match role {
                Role::Planner => (0, layout.planner_actions),
                Role::Worker => (np, layout.worker_actions),
            };
            let start = offset + bucket * width;
            flat[start..start + width].copy_from_slice(row);
        }
        flat
    }
}

/// Score-function gradient of [`agent_logprob_sum`]: for a visit to row `r`
/// taking action `k`, adds `1 − p_k` at `k` and `−p_a` elsewhere.
pub fn grad_agent_logprob<F: Real>(
    params: &PolicyParams<F>,
    spec: &FactWorldSpec,
    traj: &Trajectory,
    agent: AgentId,
) -> Result<SparseGrad<F>, PolicyError> {
    let mut grad = SparseGrad::default();
    for (bucket, action) in traj.agent_actions(spec, agent)? {
        let ctx = role_context(agent, bucket);
        params.logit(ctx, action)?;
        let probs = softmax(params.row(ctx)?);
        let row = grad
            .rows
            .entry((ctx.role, ctx.bucket))
            .or_insert_with(|| vec![F::zero(); probs.len()]);
        for (a, (g, p)) in row.iter_mut().zip(&probs).enumerate() {
            let indicator = if a == action { F::one() } else { F::zero() };
            *g = *g + indicator - *p;
        }
    }
    Ok(grad)
}
