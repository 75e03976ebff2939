use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::instance::Instance;
use super::{config_hash, write_csv, RunManifest, SuiteResult, TOOL_VERSION};
use crate::agent::{run_agent, run_agent_with_features, AgentConfig, AgentSnapshot, RunLog};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

/// Input of the `train` command. A relative `instance` path is resolved
/// against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub instance: PathBuf,
    pub seeds: Vec<u64>,
    /// Overrides `agent.rounds`.
    #[serde(default)]
    pub rounds: Option<usize>,
    /// Start from the features stored in the instance instead of
    /// `agent.features`.
    #[serde(default)]
    pub instance_features: bool,
    #[serde(default)]
    pub agent: AgentConfig,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = read_json(path)?;
        if config.instance.is_relative() {
            if let Some(dir) = path.parent() {
                config.instance = dir.join(&config.instance);
            }
        }
        Ok(config)
    }

    pub fn effective_agent(&self) -> AgentConfig {
        let mut agent = self.agent.clone();
        if let Some(r) = self.rounds {
            agent.rounds = r;
        }
        agent
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub seed: u64,
    pub error: Option<String>,
    pub state: AgentSnapshot,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<RunLog>,
    pub manifest: RunManifest,
}

impl TrainOutcome {
    pub fn all_ok(&self) -> bool {
        self.logs.iter().all(|l| l.error.is_none())
    }
}

pub fn run_csv_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("run_seed{seed}.csv"))
}

pub fn final_state_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("final_seed{seed}.json"))
}

/// Runs every seed, writing one CSV (a row per round) and one final-state
/// JSON per seed, then `manifest.json`.
pub fn train(config: &TrainConfig, instance: &Instance, out_dir: &Path) -> Result<TrainOutcome> {
    if config.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let agent = config.effective_agent();
    agent.validate()?;
    let features = if config.instance_features {
        Some(
            instance
                .features
                .clone()
                .ok_or_else(|| Error::InvalidArgument("instance has no features".into()))?,
        )
    } else {
        None
    };
    std::fs::create_dir_all(out_dir)?;
    let mut logs = Vec::with_capacity(config.seeds.len());
    let mut artifacts = Vec::new();
    let mut residuals = BTreeMap::new();
    for &seed in &config.seeds {
        let log = match &features {
            Some(f) => run_agent_with_features(&instance.mdp, f.clone(), &agent, seed)?,
            None => run_agent(&instance.mdp, &agent, seed)?,
        };
        let csv = run_csv_path(out_dir, seed);
        write_csv(&csv, &log.rounds)?;
        let fin = final_state_path(out_dir, seed);
        write_json(
            &fin,
            &FinalState {
                seed,
                error: log.error.clone(),
                state: log.final_state.clone(),
            },
        )?;
        for path in [&csv, &fin] {
            artifacts.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        let drift = log.rounds.iter().map(|r| r.precision_drift).fold(0.0, f64::max);
        residuals.insert(format!("seed{seed}_precision_drift"), drift);
        logs.push(log);
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash(config)?,
        seeds: config.seeds.clone(),
        artifacts,
        suites: vec![SuiteResult {
            name: "train".into(),
            passed: logs.iter().all(|l| l.error.is_none()),
            residuals,
        }],
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(TrainOutcome { logs, manifest })
}
