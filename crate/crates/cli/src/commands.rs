use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sharp_core::analytics::{
    comparison_summary, coordination_report, sweep_p, CoordinationReport, Estimator, SWEEP_HEADER,
};
use sharp_core::env::Trajectory;
use sharp_core::game::{axiom_report, parse_game_file, shapley_exact, single_ablation_credit};
use sharp_core::log::{parse_log, write_batch, write_log, LoggedBatch};
use sharp_core::optim::{train_with, OptimError, QueryStream, TrainRow, TRAIN_RECORD_HEADER};
use sharp_core::policy::PolicyParams;
use sharp_core::reward::{write_reward_rows, REWARD_TABLE_HEADER};
use sharp_core::rollout::{evaluate, BatchHeader, EvalSummary};
use sharp_core::Policy64;

use crate::config::{resolve_seed, RunConfig};
use crate::{CliError, Command, RunArgs};

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "train_record.csv";
/// Wall-clock per step; the only artifact that differs between identical runs.
pub const TIMING_FILE: &str = "timing.csv";
pub const REWARDS_FILE: &str = "rewards.csv";
pub const LOG_FILE: &str = "trajectories.jsonl";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const COORDINATION_FILE: &str = "coordination.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_LOG_FILE: &str = "eval_trajectories.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_RUNS_FILE: &str = "sweep_runs.csv";

/// Artifacts compared byte-for-byte by the determinism checks.
pub const DETERMINISTIC_ARTIFACTS: &[&str] = &[
    CONFIG_FILE,
    RECORD_FILE,
    REWARDS_FILE,
    LOG_FILE,
    CHECKPOINT_FILE,
    COORDINATION_FILE,
    EVAL_FILE,
    EVAL_LOG_FILE,
];

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Shapley { game_file } => cmd_shapley(&game_file).map(|out| print!("{out}")),
        Command::Analyze {
            log,
            estimator,
            out,
            baseline,
        } => cmd_analyze(&log, &estimator, out.as_deref(), baseline.as_deref()).map(|_| ()),
        Command::Sweep { run, p, seeds } => cmd_sweep(&run, &p, seeds).map(|_| ()),
        Command::Eval {
            run,
            checkpoint,
            episodes,
        } => cmd_eval(&run, &checkpoint, episodes).map(|_| ()),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn parse_estimator(s: &str) -> Result<Estimator, CliError> {
    s.parse()
        .map_err(|e: sharp_core::analytics::AnalyticsError| CliError::Config(e.to_string()))
}

/// Load the config and apply flag/environment overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    let env_seed = std::env::var("SHARP_SEED").ok();
    config.train.seed = resolve_seed(args.seed, env_seed.as_deref(), config.train.seed)?;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(e) = &args.estimator {
        config.train.estimator = parse_estimator(e)?;
    }
    config.validate()?;
    Ok(config)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn internal(e: impl ToString) -> CliError {
    CliError::Internal(e.to_string())
}

fn eval_seed(run_seed: u64) -> u64 {
    run_seed
}

fn eval_table(eval: &EvalSummary, params_version: u64, seed: u64) -> String {
    format!(
        "episodes,seed,params_version,success_rate,mean_cost\n{},{},{},{:?},{:?}\n",
        eval.episodes, seed, params_version, eval.success_rate, eval.mean_cost
    )
}

/// One single-trajectory batch per evaluation episode.
fn eval_log(trajectories: &[Trajectory], params_version: u64) -> String {
    let batches: Vec<LoggedBatch> = trajectories
        .iter()
        .map(|t| LoggedBatch {
            header: BatchHeader {
                query_id: t.query.id,
                g: 1,
                params_version,
                base_seed: t.seed,
            },
            trajectories: vec![t.clone()],
        })
        .collect();
    write_log(&batches)
}

/// What a finished training run produced.
#[derive(Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub rows: Vec<TrainRow>,
    pub report: CoordinationReport,
    pub eval: Option<EvalSummary>,
}

pub fn cmd_train(args: &RunArgs) -> Result<TrainSummary, CliError> {
    let config = resolve_config(args)?;
    train_from_config(&config)
}

pub fn train_from_config(config: &RunConfig) -> Result<TrainSummary, CliError> {
    let dir = config.output_dir.clone();
    create_dir(&dir)?;
    write(&dir, CONFIG_FILE, &config.to_toml())?;

    let mut record = format!("{TRAIN_RECORD_HEADER}\n");
    let mut rewards = format!("{REWARD_TABLE_HEADER}\n");
    let mut log = String::new();
    let mut reward_error = None;
    let mut last_batch: Vec<Trajectory> = Vec::new();
    let result = train_with(
        &config.env,
        &config.train,
        &config.reward,
        Policy64::for_world(&config.env),
        &QueryStream::Sampled,
        |batch, row| {
            record.push_str(&row.to_csv());
            record.push('\n');
            if config.artifacts.rewards_table {
                if let Err(e) = write_reward_rows(batch, &mut rewards) {
                    reward_error.get_or_insert(e);
                }
            }
            if config.artifacts.trajectory_log {
                write_batch(batch, &mut log);
            }
            last_batch.clone_from(&batch.trajectories);
        },
    );
    write(&dir, RECORD_FILE, &record)?;
    if let Some(e) = reward_error {
        return Err(internal(e));
    }
    if config.artifacts.rewards_table {
        write(&dir, REWARDS_FILE, &rewards)?;
    }
    if config.artifacts.trajectory_log {
        write(&dir, LOG_FILE, &log)?;
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e @ OptimError::Diverged { .. }) => return Err(CliError::Diverged(e.to_string())),
        Err(OptimError::InvalidConfig(m)) => return Err(CliError::Config(m)),
        Err(e) => return Err(internal(e)),
    };
    let mut timing = String::from("step,wall_clock_ms\n");
    for (step, ms) in outcome.wall_clock_ms.iter().enumerate() {
        let _ = writeln!(timing, "{step},{ms:.3}");
    }
    write(&dir, TIMING_FILE, &timing)?;
    write(&dir, CHECKPOINT_FILE, &outcome.params.to_checkpoint())?;

    let estimator = config.train.estimator;
    let (report, source, eval) = if config.eval.episodes > 0 {
        let seed = eval_seed(config.train.seed);
        let eval = evaluate(&config.env, &outcome.params, config.eval.episodes, seed).map_err(internal)?;
        let version = outcome.params.version();
        write(&dir, EVAL_FILE, &eval_table(&eval, version, seed))?;
        write(&dir, EVAL_LOG_FILE, &eval_log(&eval.trajectories, version))?;
        let report = coordination_report(&eval.trajectories, estimator).map_err(internal)?;
        (report, format!("eval:{EVAL_LOG_FILE}"), Some(eval))
    } else {
        let report = coordination_report(&last_batch, estimator).map_err(internal)?;
        (report, "train:last_batch".to_string(), None)
    };
    write(&dir, COORDINATION_FILE, &report.to_csv(&source))?;

    if let Some(last) = outcome.rows.last() {
        println!(
            "trained {} steps: J {:.4}, batch success {:.3}, replays {}",
            outcome.rows.len(),
            last.objective,
            last.success,
            outcome.total_replays
        );
    } else {
        println!("trained 0 steps");
    }
    if let Some(e) = &eval {
        println!(
            "eval: success {:.4} over {} episodes, mean cost {:.3}",
            e.success_rate, e.episodes, e.mean_cost
        );
    }
    println!("{}", report.summary());
    println!("artifacts in {}", dir.display());
    Ok(TrainSummary {
        output_dir: dir,
        rows: outcome.rows,
        report,
        eval,
    })
}

pub fn cmd_shapley(path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let game = parse_game_file(&text).map_err(|e| CliError::malformed(path, e))?;
    let phi = shapley_exact(&game).map_err(|e| CliError::malformed(path, e))?;
    let ablation = single_ablation_credit(&game);
    let axioms = axiom_report(&game, &phi).map_err(internal)?;
    let mut out = String::from("agent,shapley,ablation\n");
    for (m, (s, a)) in phi.phi.iter().zip(&ablation.phi).enumerate() {
        let _ = writeln!(out, "{m},{s:?},{a:?}");
    }
    let _ = writeln!(out, "# efficiency_residual {:e}", axioms.efficiency_residual);
    if axioms.detection_ran {
        let _ = writeln!(
            out,
            "# symmetry_violation {:e} over {} pairs",
            axioms.symmetry_violation,
            axioms.symmetric_pairs.len()
        );
        let _ = writeln!(
            out,
            "# dummy_violation {:e} over {} dummies",
            axioms.dummy_violation,
            axioms.dummies.len()
        );
    }
    Ok(out)
}

fn load_log(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let batches = parse_log(&text).map_err(|e| CliError::malformed(path, e))?;
    Ok(batches.into_iter().flat_map(|b| b.trajectories).collect())
}

pub fn cmd_analyze(
    log: &Path,
    estimator: &str,
    out: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<CoordinationReport, CliError> {
    let estimator = parse_estimator(estimator)?;
    let trajectories = load_log(log)?;
    let report = coordination_report(&trajectories, estimator).map_err(|e| CliError::malformed(log, e))?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => log.with_file_name(format!("coordination_{estimator}.csv")),
    };
    let mut csv = report.to_csv(&log.display().to_string());
    let base = match baseline {
        Some(b) => {
            let trajs = load_log(b)?;
            let base = coordination_report(&trajs, estimator).map_err(|e| CliError::malformed(b, e))?;
            csv.push_str(&base.csv_row(&b.display().to_string()));
            csv.push('\n');
            Some(base)
        }
        None => None,
    };
    fs::write(&out, &csv).map_err(|e| CliError::io(&out, e))?;
    println!("{}", report.summary());
    if let Some(base) = &base {
        println!("{}", comparison_summary(base, &report));
    }
    println!("report written to {}", out.display());
    Ok(report)
}

pub fn cmd_sweep(args: &RunArgs, p_values: &[f64], n_seeds: u64) -> Result<String, CliError> {
    let config = resolve_config(args)?;
    if n_seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds).map(|k| config.train.seed.wrapping_add(k)).collect();
    let table = sweep_p::<f64>(
        &config.env,
        &config.train,
        &config.reward,
        p_values,
        &seeds,
        config.eval.episodes,
    )
    .map_err(|e| match e {
        sharp_core::analytics::AnalyticsError::InvalidP(_) => CliError::Config(e.to_string()),
        sharp_core::analytics::AnalyticsError::Optim(OptimError::Diverged { .. }) => CliError::Diverged(e.to_string()),
        other => internal(other),
    })?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    write(dir, CONFIG_FILE, &config.to_toml())?;
    let csv = table.to_csv();
    write(dir, SWEEP_FILE, &csv)?;
    let mut runs = String::from("p,seed,replays,eval_cost,final_success\n");
    for r in &table.runs {
        let _ = writeln!(
            runs,
            "{:?},{},{},{:?},{:?}",
            r.p, r.seed, r.replays, r.eval_cost, r.final_success
        );
    }
    write(dir, SWEEP_RUNS_FILE, &runs)?;
    debug_assert!(csv.starts_with(SWEEP_HEADER));
    print!("{csv}");
    Ok(csv)
}

pub fn cmd_eval(args: &RunArgs, checkpoint: &Path, episodes: Option<usize>) -> Result<EvalSummary, CliError> {
    let config = resolve_config(args)?;
    let text = fs::read_to_string(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let params: Policy64 = PolicyParams::from_checkpoint(&text).map_err(|e| CliError::malformed(checkpoint, e))?;
    params
        .check_layout(&config.env)
        .map_err(|e| CliError::Config(format!("checkpoint does not fit env: {e}")))?;
    let episodes = episodes.unwrap_or(config.eval.episodes);
    let seed = eval_seed(config.train.seed);
    let eval = evaluate(&config.env, &params, episodes, seed).map_err(internal)?;
    let report = coordination_report(&eval.trajectories, config.train.estimator).map_err(internal)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    write(dir, EVAL_FILE, &eval_table(&eval, params.version(), seed))?;
    write(dir, EVAL_LOG_FILE, &eval_log(&eval.trajectories, params.version()))?;
    write(
        dir,
        COORDINATION_FILE,
        &report.to_csv(&format!("eval:{}", checkpoint.display())),
    )?;
    println!(
        "eval: success {:.4} over {} episodes, mean cost {:.3}",
        eval.success_rate, eval.episodes, eval.mean_cost
    );
    println!("{}", report.summary());
    Ok(eval)
}
