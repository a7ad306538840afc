#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharp_core::env::{
    Answer, EpisodeState, FactSet, FactWorldSpec, PlannerMove, PlannerOutcome, QueryInstance, RequiredFacts,
    SubtaskTemplate, ToolSpec, Trajectory,
};
use sharp_core::policy::PolicyParams;
use sharp_core::seed::RecordingRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn templates(n_facts: usize, decoy: bool) -> Vec<SubtaskTemplate> {
    let mut t: Vec<_> = (0..n_facts)
        .map(|f| SubtaskTemplate {
            name: format!("t{f}"),
            target: FactSet::single(f),
        })
        .collect();
    if decoy {
        t.push(SubtaskTemplate {
            name: "decoy".into(),
            target: FactSet::EMPTY,
        });
    }
    t
}

/// Small stochastic world with a poison tool; at most `budget` workers.
pub fn world(budget: usize) -> FactWorldSpec {
    let n = 3;
    FactWorldSpec {
        n_facts: n,
        required: RequiredFacts::UniformSubset { k: 2 },
        templates: templates(n, true),
        tools: vec![
            ToolSpec {
                name: "search".into(),
                success: vec![0.7, 0.6, 0.5],
                corruption: 0.0,
            },
            ToolSpec {
                name: "poison".into(),
                success: vec![0.9; n],
                corruption: 0.6,
            },
        ],
        planner_turn_budget: budget,
        worker_step_budget: 2,
    }
}

/// Deterministic world: required {0, 1}; tool 0 always succeeds, tool 1
/// never does, tool 2 always succeeds and always corrupts.
pub fn fixed_world() -> FactWorldSpec {
    FactWorldSpec {
        n_facts: 3,
        required: RequiredFacts::Fixed {
            facts: FactSet::of([0, 1]),
        },
        templates: templates(3, true),
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
        planner_turn_budget: 5,
        worker_step_budget: 2,
    }
}

pub fn fixed_query(spec: &FactWorldSpec) -> QueryInstance {
    let RequiredFacts::Fixed { facts } = spec.required else {
        panic!("fixed world expected")
    };
    QueryInstance {
        id: 1,
        required: facts,
        menu: (0..spec.templates.len()).collect(),
    }
}

/// Dispatch each `(template, tools)` in order, then answer with what was gathered.
pub fn scripted(spec: &FactWorldSpec, plan: &[(usize, &[usize])], seed: u64) -> Trajectory {
    let mut draws = RecordingRng::new(seed);
    let mut st = EpisodeState::new(fixed_query(spec));
    for &(template, tools) in plan {
        let PlannerOutcome::Dispatched { agent, .. } = st.planner_step(spec, PlannerMove::Dispatch(template)).unwrap()
        else {
            panic!("expected dispatch")
        };
        for &tool in tools {
            if st.active_worker(spec).is_none() {
                break;
            }
            st.worker_tool_call(spec, agent, tool, &mut draws).unwrap();
        }
        while let Some((agent, _)) = st.active_worker(spec) {
            st.worker_tool_call(spec, agent, 1, &mut draws).unwrap();
        }
    }
    st.planner_step(spec, PlannerMove::Answer(Answer::Gathered)).unwrap();
    st.finish(seed, draws.into_trace()).unwrap()
}

/// Planner answers `answer` on its first turn; no workers.
pub fn planner_only(spec: &FactWorldSpec, query: QueryInstance, answer: FactSet, seed: u64) -> Trajectory {
    let mut st = EpisodeState::new(query);
    st.planner_step(spec, PlannerMove::Answer(Answer::Explicit(answer)))
        .unwrap();
    st.finish(seed, vec![]).unwrap()
}

/// Logits drawn uniformly from `[-scale, scale]`.
pub fn random_params(spec: &FactWorldSpec, scale: f64, rng: &mut impl Rng) -> PolicyParams<f64> {
    let mut p = PolicyParams::for_world(spec);
    let flat: Vec<f64> = p.flat().iter().map(|_| rng.gen_range(-scale..=scale)).collect();
    p.set_flat(&flat);
    p
}

/// `base` plus uniform noise of width `scale` on every logit.
pub fn perturbed(base: &PolicyParams<f64>, scale: f64, rng: &mut impl Rng) -> PolicyParams<f64> {
    let mut p = base.clone();
    let flat: Vec<f64> = base.flat().iter().map(|x| x + rng.gen_range(-scale..=scale)).collect();
    p.set_flat(&flat);
    p
}
