//! Cooperative games over small agent sets and their Shapley values.
//!
//! Coalitions are bitmasks: bit `m` set means agent `m` is present. Values are
//! kept in a dense table indexed by that mask for up to [`MAX_TABLE_AGENTS`]
//! agents; larger (or lazily evaluated) games use a callback.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::Scalar;

/// Largest game stored as a dense table and accepted by [`shapley_exact`].
pub const MAX_TABLE_AGENTS: usize = 20;
/// Largest game for which [`axiom_report`] searches for symmetric pairs and dummies.
pub const MAX_AXIOM_DETECTION_AGENTS: usize = 12;
/// Coalitions are `u64` masks.
pub const MAX_AGENTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("a game needs at least one agent")]
    NoAgents,
    #[error("{n} agents exceeds the limit of {limit}")]
    TooManyAgents { n: usize, limit: usize },
    #[error("coalition size {size} is invalid for a {n}-agent game (must be < n)")]
    InvalidCoalitionSize { size: usize, n: usize },
    #[error("value table has {got} entries, expected {expected}")]
    TableSize { got: usize, expected: usize },
    #[error("credit vector has length {got}, game has {expected} agents")]
    LengthMismatch { got: usize, expected: usize },
    #[error("sample count must be at least 1")]
    NoSamples,
}

/// Set of agents, canonically encoded as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coalition(u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn from_mask(mask: u64) -> Self {
        Coalition(mask)
    }

    /// Grand coalition `{0, …, n-1}`.
    pub fn full(n: usize) -> Self {
        debug_assert!(n <= MAX_AGENTS);
        if n == MAX_AGENTS {
            Coalition(u64::MAX)
        } else {
            Coalition((1u64 << n) - 1)
        }
    }

    pub fn from_members<I: IntoIterator<Item = usize>>(members: I) -> Self {
        members.into_iter().fold(Coalition::EMPTY, |c, m| c.with(m))
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn contains(self, agent: usize) -> bool {
        agent < MAX_AGENTS && self.0 & (1u64 << agent) != 0
    }

    pub fn with(self, agent: usize) -> Self {
        Coalition(self.0 | (1u64 << agent))
    }

    pub fn without(self, agent: usize) -> Self {
        Coalition(self.0 & !(1u64 << agent))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// True when every member is below `n`.
    pub fn within(self, n: usize) -> bool {
        n >= MAX_AGENTS || self.0 >> n == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        let mask = self.0;
        (0..MAX_AGENTS).filter(move |m| mask & (1u64 << m) != 0)
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

type Evaluator<S> = Arc<dyn Fn(Coalition) -> S + Send + Sync>;

#[derive(Clone)]
enum Values<S> {
    Table(Arc<Vec<S>>),
    Callback(Evaluator<S>),
}

/// Transferable-utility game `v: 2^N -> S`.
#[derive(Clone)]
pub struct CooperativeGame<S> {
    n_agents: usize,
    values: Values<S>,
}

impl<S: Scalar> CooperativeGame<S> {
    /// Dense game; `table[mask]` is the value of the coalition with that mask.
    pub fn from_table(n_agents: usize, table: Vec<S>) -> Result<Self, GameError> {
        check_agents(n_agents, MAX_TABLE_AGENTS)?;
        let expected = 1usize << n_agents;
        if table.len() != expected {
            return Err(GameError::TableSize {
                got: table.len(),
                expected,
            });
        }
        Ok(CooperativeGame {
            n_agents,
            values: Values::Table(Arc::new(table)),
        })
    }

    /// Lazily evaluated game. The evaluator must be deterministic.
    pub fn from_fn<F>(n_agents: usize, f: F) -> Result<Self, GameError>
    where
        F: Fn(Coalition) -> S + Send + Sync + 'static,
    {
        check_agents(n_agents, MAX_AGENTS)?;
        Ok(CooperativeGame {
            n_agents,
            values: Values::Callback(Arc::new(f)),
        })
    }

    /// Like [`from_fn`](Self::from_fn) but caches each coalition's value after
    /// the first evaluation.
    pub fn memoized<F>(n_agents: usize, f: F) -> Result<Self, GameError>
    where
        F: Fn(Coalition) -> S + Send + Sync + 'static,
    {
        let cache: Mutex<HashMap<Coalition, S>> = Mutex::new(HashMap::new());
        Self::from_fn(n_agents, move |c| {
            if let Some(v) = cache.lock().expect("memo lock").get(&c) {
                return v.clone();
            }
            let v = f(c);
            cache.lock().expect("memo lock").insert(c, v.clone());
            v
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn grand_coalition(&self) -> Coalition {
        Coalition::full(self.n_agents)
    }

    pub fn value(&self, coalition: Coalition) -> S {
        debug_assert!(coalition.within(self.n_agents));
        match &self.values {
            Values::Table(t) => t[coalition.mask() as usize].clone(),
            Values::Callback(f) => f(coalition),
        }
    }

    /// Materialize every coalition value. Fails above [`MAX_TABLE_AGENTS`].
    pub fn table(&self) -> Result<Vec<S>, GameError> {
        check_agents(self.n_agents, MAX_TABLE_AGENTS)?;
        Ok(match &self.values {
            Values::Table(t) => t.as_ref().clone(),
            Values::Callback(f) => (0..1u64 << self.n_agents).map(|mask| f(Coalition(mask))).collect(),
        })
    }

    /// Dense copy of this game.
    pub fn tabulate(&self) -> Result<Self, GameError> {
        Self::from_table(self.n_agents, self.table()?)
    }

    /// `a·self + b·other`, evaluated coalition by coalition.
    pub fn linear_combination(&self, a: S, other: &Self, b: S) -> Result<Self, GameError> {
        if other.n_agents != self.n_agents {
            return Err(GameError::LengthMismatch {
                got: other.n_agents,
                expected: self.n_agents,
            });
        }
        let lhs = self.table()?;
        let rhs = other.table()?;
        let table = lhs
            .into_iter()
            .zip(rhs)
            .map(|(x, y)| a.clone() * x + b.clone() * y)
            .collect();
        Self::from_table(self.n_agents, table)
    }
}

impl<S: Scalar> fmt::Debug for CooperativeGame<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.values {
            Values::Table(_) => "table",
            Values::Callback(_) => "callback",
        };
        f.debug_struct("CooperativeGame")
            .field("n_agents", &self.n_agents)
            .field("values", &kind)
            .finish()
    }
}

fn check_agents(n: usize, limit: usize) -> Result<(), GameError> {
    if n == 0 {
        Err(GameError::NoAgents)
    } else if n > limit {
        Err(GameError::TooManyAgents { n, limit })
    } else {
        Ok(())
    }
}

/// Per-agent credit.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyVector<S> {
    pub phi: Vec<S>,
}

impl<S: Scalar> ShapleyVector<S> {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn total(&self) -> S {
        self.phi.iter().cloned().fold(S::zero(), |a, b| a + b)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.phi.iter().map(Scalar::as_f64).collect()
    }
}

/// Shapley weight `|S|!(n-|S|-1)!/n!` of a coalition of the given size.
///
/// Computed as `1 / (n · C(n-1, |S|))`, which is exact in rationals and
/// avoids factorial overflow in floats.
pub fn coalition_weight<S: Scalar>(coalition_size: usize, n: usize) -> Result<S, GameError> {
    if n == 0 {
        return Err(GameError::NoAgents);
    }
    if coalition_size >= n {
        return Err(GameError::InvalidCoalitionSize {
            size: coalition_size,
            n,
        });
    }
    let denom = binomial(n - 1, coalition_size)
        .checked_mul(n as u128)
        .expect("weight denominator overflow");
    Ok(S::one() / S::from_u128(denom).expect("denominator representable"))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Exact Shapley value by enumerating every coalition, `O(n·2^n)`.
pub fn shapley_exact<S: Scalar>(game: &CooperativeGame<S>) -> Result<ShapleyVector<S>, GameError> {
    let n = game.n_agents();
    let table = game.table()?;
    let weights: Vec<S> = (0..n).map(|s| coalition_weight(s, n)).collect::<Result<_, _>>()?;
    let phi = (0..n)
        .into_par_iter()
        .map(|m| {
            let bit = 1usize << m;
            let mut acc = S::zero();
            for mask in 0..table.len() {
                if mask & bit != 0 {
                    continue;
                }
                let delta = table[mask | bit].clone() - table[mask].clone();
                if !delta.is_zero() {
                    acc += weights[mask.count_ones() as usize].clone() * delta;
                }
            }
            acc
        })
        .collect();
    Ok(ShapleyVector { phi })
}

/// Monte-Carlo Shapley estimate with per-agent standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct McShapley<S> {
    pub estimate: ShapleyVector<S>,
    pub std_error: Vec<f64>,
    pub samples: usize,
}

/// Average marginal contribution over `samples` uniformly random agent
/// orderings. Deterministic in `seed`.
pub fn shapley_permutation_mc<S: Scalar>(
    game: &CooperativeGame<S>,
    samples: usize,
    seed: u64,
) -> Result<McShapley<S>, GameError> {
    if samples == 0 {
        return Err(GameError::NoSamples);
    }
    let n = game.n_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut sums = vec![S::zero(); n];
    let mut sq = vec![0.0f64; n];
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let mut coalition = Coalition::EMPTY;
        let mut prev = game.value(coalition);
        for &m in &order {
            coalition = coalition.with(m);
            let next = game.value(coalition);
            let delta = next.clone() - prev;
            let d = delta.as_f64();
            sq[m] += d * d;
            sums[m] += delta;
            prev = next;
        }
    }
    let count = S::from_count(samples);
    let k = samples as f64;
    let phi: Vec<S> = sums.into_iter().map(|s| s / count.clone()).collect();
    let std_error = phi
        .iter()
        .zip(&sq)
        .map(|(mean, &sq)| {
            if samples < 2 {
                return 0.0;
            }
            let mean = mean.as_f64();
            let var = ((sq - k * mean * mean) / (k - 1.0)).max(0.0);
            (var / k).sqrt()
        })
        .collect();
    Ok(McShapley {
        estimate: ShapleyVector { phi },
        std_error,
        samples,
    })
}

/// Leave-one-out credit `v(N) - v(N \ {m})` for every agent.
pub fn single_ablation_credit<S: Scalar>(game: &CooperativeGame<S>) -> ShapleyVector<S> {
    let full = game.grand_coalition();
    let v_full = game.value(full);
    let phi = (0..game.n_agents())
        .map(|m| v_full.clone() - game.value(full.without(m)))
        .collect();
    ShapleyVector { phi }
}

/// Residuals of a credit vector against the Shapley axioms.
#[derive(Clone, Debug, PartialEq)]
pub struct AxiomReport {
    /// `|Σ phi − (v(N) − v(∅))|`.
    pub efficiency_residual: f64,
    /// Largest `|phi[i] − phi[j]|` over detected symmetric pairs.
    pub symmetry_violation: f64,
    /// Largest `|phi[m]|` over detected dummy agents.
    pub dummy_violation: f64,
    pub symmetric_pairs: Vec<(usize, usize)>,
    pub dummies: Vec<usize>,
    /// False when the game was too large for pair/dummy detection.
    pub detection_ran: bool,
}

impl AxiomReport {
    pub fn max_residual(&self) -> f64 {
        self.efficiency_residual
            .max(self.symmetry_violation)
            .max(self.dummy_violation)
    }
}

pub fn axiom_report<S: Scalar>(game: &CooperativeGame<S>, phi: &ShapleyVector<S>) -> Result<AxiomReport, GameError> {
    let n = game.n_agents();
    if phi.len() != n {
        return Err(GameError::LengthMismatch {
            got: phi.len(),
            expected: n,
        });
    }
    let surplus = game.value(game.grand_coalition()) - game.value(Coalition::EMPTY);
    let efficiency_residual = (phi.total() - surplus).magnitude().as_f64();

    if n > MAX_AXIOM_DETECTION_AGENTS {
        return Ok(AxiomReport {
            efficiency_residual,
            symmetry_violation: 0.0,
            dummy_violation: 0.0,
            symmetric_pairs: Vec::new(),
            dummies: Vec::new(),
            detection_ran: false,
        });
    }

    let table = game.table()?;
    let dummies: Vec<usize> = (0..n)
        .filter(|&m| {
            let bit = 1usize << m;
            (0..table.len())
                .filter(|mask| mask & bit == 0)
                .all(|mask| table[mask | bit] == table[mask])
        })
        .collect();
    let mut symmetric_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (bi, bj) = (1usize << i, 1usize << j);
            let symmetric = (0..table.len())
                .filter(|mask| mask & (bi | bj) == 0)
                .all(|mask| table[mask | bi] == table[mask | bj]);
            if symmetric {
                symmetric_pairs.push((i, j));
            }
        }
    }
    let symmetry_violation = symmetric_pairs
        .iter()
        .map(|&(i, j)| (phi.phi[i].clone() - phi.phi[j].clone()).magnitude().as_f64())
        .fold(0.0, f64::max);
    let dummy_violation = dummies
        .iter()
        .map(|&m| phi.phi[m].magnitude().as_f64())
        .fold(0.0, f64::max);
    Ok(AxiomReport {
        efficiency_residual,
        symmetry_violation,
        dummy_violation,
        symmetric_pairs,
        dummies,
        detection_ran: true,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum GameFileError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing header line `n=<count>`")]
    MissingHeader,
    #[error("coalition {mask} has no value")]
    MissingCoalition { mask: u64 },
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Parse the `n=<count>` + `<bitmask> <value>` text format.
///
/// Blank lines and lines starting with `#` are ignored. Every one of the
/// `2^n` coalitions must appear exactly once.
pub fn parse_game_file(text: &str) -> Result<CooperativeGame<f64>, GameFileError> {
    let mut n: Option<usize> = None;
    let mut table: Vec<Option<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: String| GameFileError::Malformed { line: line_no, message };
        let Some(count) = n else {
            let count = line
                .strip_prefix("n=")
                .ok_or_else(|| malformed(format!("expected header `n=<count>`, found `{line}`")))?
                .trim()
                .parse::<usize>()
                .map_err(|e| malformed(format!("bad agent count: {e}")))?;
            check_agents(count, MAX_TABLE_AGENTS)?;
            n = Some(count);
            table = vec![None; 1 << count];
            continue;
        };
        let mut parts = line.split_whitespace();
        let (Some(mask), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(malformed(format!("expected `<bitmask> <value>`, found `{line}`")));
        };
        let mask: u64 = mask
            .parse()
            .map_err(|e| malformed(format!("bad bitmask `{mask}`: {e}")))?;
        let value: f64 = value
            .parse()
            .map_err(|e| malformed(format!("bad value `{value}`: {e}")))?;
        if !value.is_finite() {
            return Err(malformed(format!("value `{value}` is not finite")));
        }
        if mask >> count != 0 {
            return Err(malformed(format!("bitmask {mask} names agents outside 0..{count}")));
        }
        let slot = &mut table[mask as usize];
        if slot.is_some() {
            return Err(malformed(format!("coalition {mask} listed twice")));
        }
        *slot = Some(value);
    }
    let n = n.ok_or(GameFileError::MissingHeader)?;
    let values = table
        .into_iter()
        .enumerate()
        .map(|(mask, v)| v.ok_or(GameFileError::MissingCoalition { mask: mask as u64 }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CooperativeGame::from_table(n, values)?)
}

/// Inverse of [`parse_game_file`]; values print in shortest round-trip form.
pub fn write_game_file(game: &CooperativeGame<f64>) -> Result<String, GameError> {
    let table = game.table()?;
    let mut out = format!("n={}\n", game.n_agents());
    for (mask, v) in table.iter().enumerate() {
        out.push_str(&format!("{mask} {v:?}\n"));
    }
    Ok(out)
}
