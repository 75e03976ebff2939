use serde::{Deserialize, Serialize};

use super::median_iqr;
use crate::agent::{run_agent, AgentConfig, Exploration, RunLog};
use crate::error::Result;
use crate::mdp::{make_deep_sea, DeepSeaLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    pub depth: usize,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    /// Shared by both arms except for `exploration`.
    pub agent: AgentConfig,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            depth: 10,
            gamma: 0.99,
            seeds: (0..20).collect(),
            agent: AgentConfig {
                rounds: 500,
                episodes_per_round: 8,
                rep_every: 10,
                rep_steps: 64,
                grid_size: 64,
                ..AgentConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub exploration: Exploration,
    /// First round in which a behavior episode reached the optimal return.
    pub first_goal: Vec<Option<usize>>,
    /// First round whose greedy evaluation reached the optimal return.
    pub solved: Vec<Option<usize>>,
    /// Median of `first_goal`, with unreached seeds counted as infinite.
    pub median_first_goal: f64,
    pub solved_fraction: f64,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub depth: usize,
    pub rounds: usize,
    pub optimal_return: f64,
    pub ts: ArmReport,
    pub epsilon_greedy: ArmReport,
}

fn arm(logs: &[RunLog], exploration: Exploration, target: f64) -> ArmReport {
    let first_goal: Vec<Option<usize>> = logs.iter().map(|l| l.first_round_reaching(target)).collect();
    let solved: Vec<Option<usize>> = logs.iter().map(|l| l.first_round_solved(target)).collect();
    let values: Vec<f64> = first_goal.iter().map(|f| f.map_or(f64::INFINITY, |v| v as f64)).collect();
    ArmReport {
        exploration,
        median_first_goal: median_iqr(&values).0,
        solved_fraction: solved.iter().filter(|s| s.is_some()).count() as f64 / logs.len().max(1) as f64,
        errors: logs.iter().filter_map(|l| l.error.clone()).collect(),
        first_goal,
        solved,
    }
}

/// Thompson sampling against ε-greedy on DeepSea under identical budgets.
/// Each run stops once its greedy evaluation is optimal.
pub fn deep_sea_benchmark(settings: &BenchmarkSettings) -> Result<BenchmarkReport> {
    let mdp = make_deep_sea::<f64>(settings.depth, settings.gamma)?;
    let optimal = DeepSeaLayout { depth: settings.depth }.optimal_return();
    let target = optimal - 1e-9;
    let run_arm = |exploration| -> Result<ArmReport> {
        let config = AgentConfig {
            exploration,
            stop_return: Some(target),
            ..settings.agent.clone()
        };
        let logs = settings
            .seeds
            .iter()
            .map(|&seed| run_agent(&mdp, &config, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(arm(&logs, exploration, target))
    };
    let ts = run_arm(Exploration::Ts)?;
    let epsilon_greedy = run_arm(Exploration::EpsilonGreedy)?;
    Ok(BenchmarkReport {
        depth: settings.depth,
        rounds: settings.agent.rounds,
        optimal_return: optimal,
        ts,
        epsilon_greedy,
    })
}
