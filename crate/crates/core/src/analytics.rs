//! Coordination metrics over trajectory populations and the
//! sparsification cost/performance sweep.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{trajectory_game, EnvError, FactWorldSpec, Trajectory};
use crate::game::{shapley_exact, single_ablation_credit, GameError, MAX_AXIOM_DETECTION_AGENTS};
use crate::optim::{train_with, OptimError, QueryStream, TrainConfig};
use crate::policy::PolicyParams;
use crate::reward::RewardWeights;
use crate::rollout::{evaluate, RolloutError};
use crate::scalar::{Rational, Real, Scalar};

/// Largest `|{0} ∪ M_i|` the exact estimator accepts.
pub const MAX_EXACT_REPORT_AGENTS: usize = MAX_AXIOM_DETECTION_AGENTS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("trajectory {index} has {n_agents} agents; the exact estimator allows at most {limit}")]
    TooManyAgents {
        index: usize,
        n_agents: usize,
        limit: usize,
    },
    #[error("p must lie in [0, 1], got {0}")]
    InvalidP(f64),
    #[error("unknown estimator {0:?} (expected exact or ablation)")]
    UnknownEstimator(String),
    #[error("trajectory {index}: {source}")]
    Trajectory { index: usize, source: EnvError },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Exact,
    Ablation,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Estimator::Exact),
            "ablation" | "single-ablation" => Ok(Estimator::Ablation),
            other => Err(AnalyticsError::UnknownEstimator(other.to_string())),
        }
    }
}

/// Credit of every agent of one trajectory (planner first), in exact
/// arithmetic so signs are never blurred by rounding.
pub fn trajectory_credits(traj: &Trajectory, estimator: Estimator) -> Result<Vec<Rational>, AnalyticsError> {
    let game = trajectory_game::<Rational>(traj).map_err(|source| AnalyticsError::Trajectory { index: 0, source })?;
    Ok(match estimator {
        Estimator::Exact => shapley_exact(&game)?.phi,
        Estimator::Ablation => single_ablation_credit(&game).phi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Usefulness {
    Useful,
    Harmful,
    Neutral,
}

pub fn classify(credit: &Rational) -> Usefulness {
    match credit.numer().signum() {
        1 => Usefulness::Useful,
        -1 => Usefulness::Harmful,
        _ => Usefulness::Neutral,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinationReport {
    pub estimator: Estimator,
    pub n_trajectories: usize,
    /// Mean planner credit.
    pub planner_score: f64,
    pub useful_fraction: f64,
    pub harmful_fraction: f64,
    pub neutral_fraction: f64,
    /// Worker invocations the fractions are taken over.
    pub n_invocations: usize,
}

pub const REPORT_HEADER: &str =
    "source,estimator,n_trajectories,n_invocations,planner_score,useful_fraction,harmful_fraction,neutral_fraction";

impl CoordinationReport {
    /// One CSV row; `source` names the trajectory population.
    pub fn csv_row(&self, source: &str) -> String {
        format!(
            "{},{},{},{},{:?},{:?},{:?},{:?}",
            source,
            self.estimator,
            self.n_trajectories,
            self.n_invocations,
            self.planner_score,
            self.useful_fraction,
            self.harmful_fraction,
            self.neutral_fraction
        )
    }

    pub fn to_csv(&self, source: &str) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row(source))
    }

    pub fn summary(&self) -> String {
        format!(
            "planner score {:.4}, useful {:.2}%, harmful {:.2}%, neutral {:.2}% over {} worker calls",
            self.planner_score,
            100.0 * self.useful_fraction,
            100.0 * self.harmful_fraction,
            100.0 * self.neutral_fraction,
            self.n_invocations
        )
    }
}

/// Planner score and useful/harmful/neutral split of worker invocations.
///
/// With no worker invocations at all every fraction but `neutral` is 0 and
/// `neutral` is 1, so the partition still sums to one.
pub fn coordination_report(
    trajectories: &[Trajectory],
    estimator: Estimator,
) -> Result<CoordinationReport, AnalyticsError> {
    if estimator == Estimator::Exact {
        if let Some((index, t)) = trajectories
            .iter()
            .enumerate()
            .find(|(_, t)| t.n_workers() + 1 > MAX_EXACT_REPORT_AGENTS)
        {
            return Err(AnalyticsError::TooManyAgents {
                index,
                n_agents: t.n_workers() + 1,
                limit: MAX_EXACT_REPORT_AGENTS,
            });
        }
    }
    let credits = trajectories
        .par_iter()
        .enumerate()
        .map(|(index, t)| {
            trajectory_credits(t, estimator).map_err(|e| match e {
                AnalyticsError::Trajectory { source, .. } => AnalyticsError::Trajectory { index, source },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (mut useful, mut harmful, mut neutral) = (0usize, 0usize, 0usize);
    let mut planner_sum = 0.0;
    for phi in &credits {
        planner_sum += phi[0].as_f64();
        for c in &phi[1..] {
            match classify(c) {
                Usefulness::Useful => useful += 1,
                Usefulness::Harmful => harmful += 1,
                Usefulness::Neutral => neutral += 1,
            }
        }
    }
    let n = useful + harmful + neutral;
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(CoordinationReport {
        estimator,
        n_trajectories: trajectories.len(),
        planner_score: if credits.is_empty() {
            0.0
        } else {
            planner_sum / credits.len() as f64
        },
        useful_fraction: frac(useful),
        harmful_fraction: frac(harmful),
        neutral_fraction: if n == 0 { 1.0 } else { frac(neutral) },
        n_invocations: n,
    })
}

/// Signed field-wise `b − a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub planner_score: f64,
    pub useful_fraction: f64,
    pub harmful_fraction: f64,
    pub neutral_fraction: f64,
    pub n_invocations: i64,
    pub n_trajectories: i64,
}

pub fn compare_runs(a: &CoordinationReport, b: &CoordinationReport) -> ReportDelta {
    ReportDelta {
        planner_score: b.planner_score - a.planner_score,
        useful_fraction: b.useful_fraction - a.useful_fraction,
        harmful_fraction: b.harmful_fraction - a.harmful_fraction,
        neutral_fraction: b.neutral_fraction - a.neutral_fraction,
        n_invocations: b.n_invocations as i64 - a.n_invocations as i64,
        n_trajectories: b.n_trajectories as i64 - a.n_trajectories as i64,
    }
}

/// Two-run comparison line, e.g. `planner score 0.4542 → 0.5084 (+0.0542)`.
pub fn comparison_summary(a: &CoordinationReport, b: &CoordinationReport) -> String {
    let d = compare_runs(a, b);
    format!(
        "planner score {:.4} → {:.4} ({:+.4}); useful {:.2}% → {:.2}% ({:+.2} pp); harmful {:.2}% → {:.2}% ({:+.2} pp)",
        a.planner_score,
        b.planner_score,
        d.planner_score,
        100.0 * a.useful_fraction,
        100.0 * b.useful_fraction,
        100.0 * d.useful_fraction,
        100.0 * a.harmful_fraction,
        100.0 * b.harmful_fraction,
        100.0 * d.harmful_fraction
    )
}

/// Labeled reference values for report-formatting tests.
pub mod reference {
    pub const CSV: &str = include_str!("../fixtures/reference_coordination.csv");

    #[derive(Clone, Debug, PartialEq)]
    pub struct Point {
        pub label: String,
        pub metric: String,
        pub value: f64,
    }

    pub fn points() -> Vec<Point> {
        CSV.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                Point {
                    label: cols[0].to_string(),
                    metric: cols[1].to_string(),
                    value: cols[2].parse().expect("fixture value"),
                }
            })
            .collect()
    }

    pub fn get(label: &str, metric: &str) -> Option<f64> {
        points()
            .into_iter()
            .find(|p| p.label == label && p.metric == metric)
            .map(|p| p.value)
    }
}

/// One trained run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub p: f64,
    pub seed: u64,
    pub replays: usize,
    pub eval_cost: f64,
    pub final_success: f64,
}

/// Per-`p` means over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub n_seeds: usize,
    pub replays: f64,
    pub eval_cost: f64,
    pub final_success: f64,
    pub final_success_se: f64,
}

pub const SWEEP_HEADER: &str = "p,n_seeds,replays,eval_cost,final_success,final_success_se";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{:?},{},{:?},{:?},{:?},{:?}",
            self.p, self.n_seeds, self.replays, self.eval_cost, self.final_success, self.final_success_se
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }
}

/// Train once per `(p, seed)` and evaluate the final policy on
/// `eval_episodes` held-out queries. All arms share training seeds, so the
/// only difference between arms of a seed is `p`.
pub fn sweep_p<F: Real>(
    spec: &FactWorldSpec,
    config: &TrainConfig,
    weights: &RewardWeights,
    p_values: &[f64],
    seeds: &[u64],
    eval_episodes: usize,
) -> Result<SweepTable, AnalyticsError> {
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(AnalyticsError::InvalidP(p));
    }
    let mut runs = Vec::with_capacity(p_values.len() * seeds.len());
    for &p in p_values {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..config.clone() };
            let w = RewardWeights {
                sparsify_p: p,
                ..*weights
            };
            let out = train_with::<F>(
                spec,
                &cfg,
                &w,
                PolicyParams::for_world(spec),
                &QueryStream::Sampled,
                |_, _| {},
            )?;
            let eval = evaluate(spec, &out.params, eval_episodes, seed)?;
            runs.push(SweepRun {
                p,
                seed,
                replays: out.total_replays,
                eval_cost: eval.mean_cost,
                final_success: eval.success_rate,
            });
        }
    }
    let rows = p_values
        .iter()
        .map(|&p| {
            let arm: Vec<&SweepRun> = runs.iter().filter(|r| r.p == p).collect();
            let k = arm.len().max(1) as f64;
            let mean = |f: &dyn Fn(&SweepRun) -> f64| arm.iter().map(|r| f(r)).sum::<f64>() / k;
            let success = mean(&|r| r.final_success);
            let var = arm.iter().map(|r| (r.final_success - success).powi(2)).sum::<f64>() / k;
            SweepRow {
                p,
                n_seeds: arm.len(),
                replays: mean(&|r| r.replays as f64),
                eval_cost: mean(&|r| r.eval_cost),
                final_success: success,
                final_success_se: (var / k).sqrt(),
            }
        })
        .collect();
    Ok(SweepTable { runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::{scripted, toy_spec};

    #[test]
    fn all_pivotal_workers_are_useful() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[0]), (1, &[0])]);
        assert_eq!(t.r_acc, 1);
        let r = coordination_report(&[t.clone(), t], Estimator::Exact).unwrap();
        assert_eq!(
            (r.useful_fraction, r.harmful_fraction, r.neutral_fraction),
            (1.0, 0.0, 0.0)
        );
        assert_eq!(r.n_invocations, 4);
        // v(N)=1 and each of the three agents is pivotal
        assert!((r.planner_score - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn failed_trajectories_are_neutral() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[1, 1]), (2, &[0])]);
        assert_eq!(t.r_acc, 0);
        let r = coordination_report(&[t], Estimator::Ablation).unwrap();
        assert_eq!(r.neutral_fraction, 1.0);
        assert_eq!(r.planner_score, 0.0);
    }

    #[test]
    fn poisoned_worker_is_harmful() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[0]), (1, &[0]), (3, &[2, 1])]);
        let r = coordination_report(&[t], Estimator::Exact).unwrap();
        assert_eq!(r.n_invocations, 3);
        assert!(r.harmful_fraction > 0.0);
        let sum = r.useful_fraction + r.harmful_fraction + r.neutral_fraction;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_invocations() {
        let r = coordination_report(&[], Estimator::Exact).unwrap();
        assert_eq!((r.n_invocations, r.neutral_fraction, r.planner_score), (0, 1.0, 0.0));
    }

    #[test]
    fn estimator_parsing() {
        assert_eq!("exact".parse::<Estimator>().unwrap(), Estimator::Exact);
        assert_eq!("ablation".parse::<Estimator>().unwrap(), Estimator::Ablation);
        assert!("mc".parse::<Estimator>().is_err());
    }

    #[test]
    fn identical_reports_have_zero_delta() {
        let spec = toy_spec();
        let t = scripted(&spec, &[(0, &[0])]);
        let r = coordination_report(&[t], Estimator::Exact).unwrap();
        let d = compare_runs(&r, &r);
        assert_eq!(
            d,
            ReportDelta {
                planner_score: 0.0,
                useful_fraction: 0.0,
                harmful_fraction: 0.0,
                neutral_fraction: 0.0,
                n_invocations: 0,
                n_trajectories: 0,
            }
        );
    }

    fn fixture_report(label: &str, planner: &str) -> CoordinationReport {
        let useful = reference::get(label, "useful_fraction").unwrap();
        let harmful = reference::get(label, "harmful_fraction").unwrap();
        CoordinationReport {
            estimator: Estimator::Exact,
            n_trajectories: 0,
            planner_score: reference::get(planner, "planner_score").unwrap(),
            useful_fraction: useful,
            harmful_fraction: harmful,
            neutral_fraction: 1.0 - useful - harmful,
            n_invocations: 0,
        }
    }

    #[test]
    fn reference_values_format() {
        let base = fixture_report("baseline", "vanilla");
        let sharp = fixture_report("sharp", "sharp");
        assert_eq!(
            comparison_summary(&base, &sharp),
            "planner score 0.4542 → 0.5084 (+0.0542); useful 11.03% → 12.96% (+1.93 pp); \
             harmful 5.48% → 4.40% (-1.08 pp)"
        );
        assert!(sharp
            .summary()
            .starts_with("planner score 0.5084, useful 12.96%, harmful 4.40%"));
        assert_eq!(reference::get("matpo", "planner_score"), Some(0.4804));
        let row = sharp.csv_row("reference");
        assert!(row.starts_with("reference,exact,0,0,0.5084,0.1296,0.044,"), "{row}");
    }
}
