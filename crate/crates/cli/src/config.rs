use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sharp_core::env::{FactSet, FactWorldSpec, RequiredFacts, SubtaskTemplate, ToolSpec};
use sharp_core::optim::TrainConfig;
use sharp_core::reward::RewardWeights;

use crate::CliError;

/// Everything a run needs; persisted next to its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub env: FactWorldSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reward: RewardWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    pub trajectory_log: bool,
    pub rewards_table: bool,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            trajectory_log: true,
            rewards_table: true,
        }
    }
}

/// Held-out rollouts of the final policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 500 }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Four-fact world: two required facts per query, one template per fact,
/// a reliable-ish search tool, a weak lookup tool, and a poison tool that
/// almost always answers but usually deletes a gathered fact.
pub fn poison_world() -> FactWorldSpec {
    let n_facts = 4;
    FactWorldSpec {
        n_facts,
        required: RequiredFacts::UniformSubset { k: 2 },
        templates: (0..n_facts)
            .map(|f| SubtaskTemplate {
                name: format!("fetch_f{f}"),
                target: FactSet::single(f),
            })
            .collect(),
        tools: vec![
            ToolSpec {
                name: "search".into(),
                success: vec![0.5; n_facts],
                corruption: 0.0,
            },
            ToolSpec {
                name: "poison".into(),
                success: vec![0.9; n_facts],
                corruption: 0.8,
            },
            ToolSpec {
                name: "lookup".into(),
                success: vec![0.1; n_facts],
                corruption: 0.0,
            },
        ],
        planner_turn_budget: 4,
        worker_step_budget: 2,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: default_output_dir(),
            artifacts: ArtifactConfig::default(),
            eval: EvalConfig::default(),
            env: poison_world(),
            train: TrainConfig::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |field: &str, e: String| CliError::Config(format!("{field}: {e}"));
        self.env.validate().map_err(|e| cfg("env", e.to_string()))?;
        self.train.validate().map_err(|e| cfg("train", e.to_string()))?;
        self.reward.validate().map_err(|e| cfg("reward", e.to_string()))?;
        if self.train.seed > i64::MAX as u64 {
            return Err(cfg(
                "train.seed",
                format!("must be below 2^63, got {}", self.train.seed),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// `--seed` beats `SHARP_SEED`, which beats the config file.
pub fn resolve_seed(flag: Option<u64>, env_var: Option<&str>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_var {
        Some(raw) => raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("SHARP_SEED: not an unsigned integer: {raw:?}"))),
        None => Ok(config),
    }
}
