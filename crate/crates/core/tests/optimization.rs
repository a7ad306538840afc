mod common;

use proptest::prelude::*;
use rand::Rng;
use sharp_core::env::{AgentId, Answer, FactWorldSpec, PlannerMove, PlannerStep, Terminal, Trajectory};
use sharp_core::optim::{
    advantage, assign_advantages, group_stats, objective_gradient, policy_ratio, sharp_objective, train, train_with,
    GroupStat, Grouping, OptimizerKind, QueryStream, TrainConfig,
};
use sharp_core::policy::{agent_logprob_sum, grad_agent_logprob, softmax};
use sharp_core::reward::{assign_rewards, RewardBundle, RewardWeights};
use sharp_core::rollout::{batch_query, collect_group, GroupBatch};
use sharp_core::{Batch64, Policy64};

const DELTA: f64 = 1e-6;

fn bundle(total: f64) -> RewardBundle<f64> {
    RewardBundle {
        r_broadcast: 0.0,
        r_marginal: 0.0,
        r_tool: 0.0,
        r_total: total,
    }
}

/// A real batch whose `r_total`s are replaced by `values` (cycled).
fn batch_with_rewards(values: &[f64], seed: u64) -> Batch64 {
    let spec = common::world(4);
    let params = common::random_params(&spec, 1.0, &mut common::rng(seed));
    let mut batch = collect_group(&spec, &params, 8, seed).unwrap();
    let mut k = 0;
    let rewards = batch
        .trajectories
        .iter()
        .map(|t| {
            (0..=t.n_workers())
                .map(|_| {
                    k += 1;
                    bundle(values[(k - 1) % values.len()])
                })
                .collect()
        })
        .collect();
    batch.rewards = Some(rewards);
    batch
}

#[test]
fn advantage_examples() {
    let stat = |xs: &[f64]| {
        let mu = xs.iter().sum::<f64>() / xs.len() as f64;
        let sigma = (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt();
        GroupStat {
            mu,
            sigma,
            n_samples: xs.len(),
        }
    };
    let s = stat(&[1.0, 0.0]);
    let (a, b) = (advantage(1.0, &s, DELTA), advantage(0.0, &s, DELTA));
    assert!((a - 0.999998).abs() < 1e-6 && a < 1.0);
    assert_eq!(a, -b);
    let c = stat(&[0.4; 5]);
    assert_eq!(advantage(0.4, &c, DELTA), 0.0);
    let single = stat(&[0.7]);
    assert_eq!(advantage(0.7, &single, DELTA), 0.0);
}

#[test]
fn stats_use_participants_only() {
    let batch = batch_with_rewards(&[1.0, 2.0, 3.0, 5.0], 3);
    let stats = group_stats(&batch, Grouping::Slot).unwrap();
    let rewards = batch.rewards.as_ref().unwrap();
    for (key, stat) in &stats.entries {
        let agent = AgentId {
            role: key.role,
            slot: key.slot,
        };
        let xs: Vec<f64> = batch
            .trajectories
            .iter()
            .zip(rewards)
            .filter(|(t, _)| t.participates(agent))
            .map(|(_, r)| r[agent.index()].r_total)
            .collect();
        assert_eq!(stat.n_samples, xs.len());
        assert!((stat.mu - xs.iter().sum::<f64>() / xs.len() as f64).abs() < 1e-12);
        assert!(stat.sigma >= 0.0);
    }
}

fn assert_normalized(batch: &Batch64, grouping: Grouping) -> Result<(), TestCaseError> {
    let stats = group_stats(batch, grouping).unwrap();
    let adv = batch.advantages.as_ref().unwrap();
    for (key, stat) in &stats.entries {
        if stat.n_samples < 2 || stat.sigma == 0.0 {
            continue;
        }
        let xs: Vec<f64> = batch
            .trajectories
            .iter()
            .zip(adv)
            .flat_map(|(t, a)| t.agents().into_iter().zip(a.iter().copied()).collect::<Vec<_>>())
            .filter(|(m, _)| grouping.key(*m) == *key)
            .map(|(_, a)| a)
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-9, "mean {mean}");
        prop_assert!((sd - stat.sigma / (stat.sigma + DELTA)).abs() <= 1e-9, "sd {sd}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn advantages_are_normalized(values in prop::collection::vec(-3.0f64..3.0, 1..40), seed in 0u64..1000, pooled in any::<bool>()) {
        let grouping = if pooled { Grouping::Role } else { Grouping::Slot };
        let mut batch = batch_with_rewards(&values, seed);
        assign_advantages(&mut batch, grouping, DELTA).unwrap();
        assert_normalized(&batch, grouping)?;
    }

    #[test]
    fn shifting_one_identity_leaves_its_advantages(values in prop::collection::vec(-3.0f64..3.0, 1..40), seed in 0u64..1000, c in -5.0f64..5.0) {
        let mut batch = batch_with_rewards(&values, seed);
        assign_advantages(&mut batch, Grouping::Slot, DELTA).unwrap();
        let before = batch.advantages.clone().unwrap();
        let target = AgentId::worker(1);
        for (t, row) in batch.trajectories.iter().zip(batch.rewards.as_mut().unwrap()) {
            if t.participates(target) {
                row[1].r_total += c;
            }
        }
        assign_advantages(&mut batch, Grouping::Slot, DELTA).unwrap();
        let after = batch.advantages.unwrap();
        for (t, (a, b)) in batch.trajectories.iter().zip(before.iter().zip(&after)) {
            for (k, m) in t.agents().into_iter().enumerate() {
                let tol = if m == target { 1e-9 } else { 0.0 };
                prop_assert!((a[k] - b[k]).abs() <= tol);
            }
        }
    }

    #[test]
    fn clip_is_pessimistic(ratio in 0.0f64..4.0, adv in -5.0f64..5.0, eps in 0.01f64..0.9) {
        let term = sharp_core::optim::clipped_term(ratio, adv, eps);
        prop_assert!(term <= ratio * adv);
        if (1.0 - eps..=1.0 + eps).contains(&ratio) {
            prop_assert_eq!(term, ratio * adv);
        }
    }
}

/// Episode of a lone decision-maker: `steps` planner moves in random
/// contexts, succeeding when its first move picks action 0.
fn single_agent_episode(
    spec: &FactWorldSpec,
    old: &Policy64,
    query: &sharp_core::env::QueryInstance,
    rng: &mut impl Rng,
) -> Trajectory {
    let layout = spec.layout();
    let steps = rng.gen_range(1..=3);
    let mut trace = Vec::new();
    for turn in 0..steps {
        let context = rng.gen_range(0..layout.planner_buckets);
        let probs = softmax(old.row(sharp_core::policy::RoleContext::planner(context)).unwrap());
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut action = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = a;
                break;
            }
        }
        trace.push(PlannerStep {
            turn,
            context,
            action: PlannerMove::from_action_id(spec, action),
        });
    }
    let r_acc = (trace[0].action.action_id(spec) == 0) as u8;
    Trajectory {
        query: query.clone(),
        seed: rng.gen(),
        planner_trace: trace,
        worker_traces: vec![],
        terminal: Some(Terminal {
            answer: Answer::Gathered,
            forced: false,
        }),
        r_acc,
        rng_trace: vec![],
    }
}

struct Reference {
    advantages: Vec<f64>,
    ratios: Vec<f64>,
    terms: Vec<f64>,
    objective: f64,
    update: Vec<f64>,
}

/// Textbook GRPO on one agent: group-normalized binary reward, sequence
/// ratio, pessimistic clip, mean over the group.
fn reference_grpo(
    spec: &FactWorldSpec,
    trajs: &[Trajectory],
    old: &Policy64,
    new: &Policy64,
    eps: f64,
    lr: f64,
) -> Reference {
    let g = trajs.len() as f64;
    let rewards: Vec<f64> = trajs.iter().map(|t| t.r_acc as f64).collect();
    let mut mu = 0.0;
    for r in &rewards {
        mu += r;
    }
    mu /= g;
    let mut var = 0.0;
    for r in &rewards {
        var += (r - mu) * (r - mu);
    }
    let sigma = (var / g).sqrt();
    let advantages: Vec<f64> = rewards.iter().map(|r| (r - mu) / (sigma + DELTA)).collect();
    let me = AgentId::PLANNER;
    let ratios: Vec<f64> = trajs
        .iter()
        .map(|t| (agent_logprob_sum(new, spec, t, me).unwrap() - agent_logprob_sum(old, spec, t, me).unwrap()).exp())
        .collect();
    let terms: Vec<f64> = ratios
        .iter()
        .zip(&advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .collect();
    let mut objective = 0.0;
    for t in &terms {
        objective += t;
    }
    objective /= g;
    let mut grad = vec![0.0; new.flat().len()];
    for ((t, &r), &a) in trajs.iter().zip(&ratios).zip(&advantages) {
        let unclipped_active = r * a <= r.clamp(1.0 - eps, 1.0 + eps) * a;
        if a == 0.0 || !unclipped_active {
            continue;
        }
        let score = grad_agent_logprob(new, spec, t, me).unwrap().to_flat(new.layout());
        let coef = r * a / g;
        for (d, s) in grad.iter_mut().zip(score) {
            *d += coef * s;
        }
    }
    let update = new.flat().iter().zip(&grad).map(|(x, d)| x + lr * d).collect();
    Reference {
        advantages,
        ratios,
        terms,
        objective,
        update,
    }
}

#[test]
fn single_agent_reduces_to_grpo() {
    let spec = common::world(3);
    let weights = RewardWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        ..RewardWeights::default()
    };
    let eps = 0.2;
    let lr = 0.5;
    let mut clipped = 0;
    for seed in 0..20u64 {
        let mut r = common::rng(500 + seed);
        let old = common::random_params(&spec, 1.0, &mut r);
        let new = common::perturbed(&old, 0.6, &mut r);
        let query = batch_query(&spec, seed);
        let trajs: Vec<Trajectory> = (0..8)
            .map(|_| single_agent_episode(&spec, &old, &query, &mut r))
            .collect();
        let mut batch: Batch64 = GroupBatch {
            query,
            base_seed: seed,
            trajectories: trajs.clone(),
            old_params: old.snapshot(),
            rewards: None,
            advantages: None,
        };
        assign_rewards(&mut batch, &weights).unwrap();
        assign_advantages(&mut batch, Grouping::Slot, DELTA).unwrap();
        let reference = reference_grpo(&spec, &trajs, &old, &new, eps, lr);

        let adv: Vec<f64> = batch.advantages.as_ref().unwrap().iter().map(|a| a[0]).collect();
        assert_eq!(adv, reference.advantages, "seed {seed}");
        for (i, t) in trajs.iter().enumerate() {
            let ratio = policy_ratio(&new, &old, &spec, t, AgentId::PLANNER).unwrap();
            assert_eq!(ratio, reference.ratios[i]);
            assert_eq!(sharp_core::optim::clipped_term(ratio, adv[i], eps), reference.terms[i]);
            clipped += ((ratio - 1.0).abs() > eps) as usize;
        }
        assert_eq!(sharp_objective(&batch, &new, &spec, eps).unwrap(), reference.objective);
        let grad = objective_gradient(&batch, &new, &spec, eps).unwrap();
        let mut stepped = new.clone();
        stepped.apply(&grad, lr).unwrap();
        assert_eq!(stepped.flat(), reference.update, "seed {seed}");
    }
    assert!(clipped > 0);
}

fn quick_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        learning_rate: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_is_a_no_op() {
    let spec = common::world(4);
    let out = train::<f64>(&spec, &quick_config(0, 1), &RewardWeights::default()).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.params, Policy64::for_world(&spec));
    assert_eq!(out.total_replays, 0);
}

#[test]
fn training_is_deterministic() {
    let spec = common::world(4);
    let weights = RewardWeights::default();
    for optimizer in [OptimizerKind::GradientAscent, OptimizerKind::AdamW] {
        let config = TrainConfig {
            optimizer,
            learning_rate: if optimizer == OptimizerKind::AdamW { 0.05 } else { 0.5 },
            ..quick_config(30, 9)
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train::<f64>(&spec, &config, &weights).unwrap())
        };
        let (a, b, c) = (run(1), run(1), run(4));
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows, c.rows);
        assert_eq!(a.params.to_checkpoint(), c.params.to_checkpoint());
        assert_ne!(a.params, Policy64::for_world(&spec));
    }
}

#[test]
fn record_rows_match_batches() {
    let spec = common::world(4);
    let mut seen = Vec::new();
    let out = train_with(
        &spec,
        &quick_config(5, 2),
        &RewardWeights::default(),
        Policy64::for_world(&spec),
        &QueryStream::Sampled,
        |batch, row| {
            assert_eq!(batch.old_params.version(), row.step as u64);
            assert_eq!(row.success, batch.success_rate());
            let invocations: usize = batch.trajectories.iter().map(|t| t.n_workers()).sum();
            assert_eq!(row.replays, invocations);
            seen.push(row.clone());
        },
    )
    .unwrap();
    assert_eq!(seen, out.rows);
    assert_eq!(out.total_replays, seen.iter().map(|r| r.replays).sum::<usize>());
    assert_eq!(out.params.version(), 5);
}

#[test]
fn fixed_query_stream_cycles() {
    let spec = common::world(4);
    let qs = vec![batch_query(&spec, 100), batch_query(&spec, 200)];
    let mut ids = Vec::new();
    train_with(
        &spec,
        &quick_config(4, 0),
        &RewardWeights::default(),
        Policy64::for_world(&spec),
        &QueryStream::Cycle(qs.clone()),
        |batch, _| ids.push(batch.query.id),
    )
    .unwrap();
    assert_eq!(ids, vec![qs[0].id, qs[1].id, qs[0].id, qs[1].id]);
}
