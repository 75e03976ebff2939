use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{median_iqr, read_csv};
use crate::agent::RoundLog;
use crate::error::{Error, Result};

/// Per-round columns aggregated across runs.
pub const METRICS: [&str; 9] = [
    "mean_return",
    "max_return",
    "eval_return",
    "sigma_exp",
    "precision_min_eig",
    "precision_max_eig",
    "theta_norm",
    "pm_residual",
    "sbm_loss",
];

fn metric(row: &RoundLog, name: &str) -> Option<f64> {
    match name {
        "mean_return" => Some(row.mean_return),
        "max_return" => Some(row.max_return),
        "eval_return" => Some(row.eval_return),
        "sigma_exp" => Some(row.sigma_exp),
        "precision_min_eig" => Some(row.precision_min_eig),
        "precision_max_eig" => Some(row.precision_max_eig),
        "theta_norm" => Some(row.theta_norm),
        "pm_residual" => row.pm_residual,
        "sbm_loss" => row.sbm_loss,
        _ => None,
    }
}

/// Median and quartiles of one metric at one round over the runs that
/// logged it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Rounds until a behavior episode first reached the goal return; runs
/// that never did count as infinite (`null` in JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSummary {
    pub threshold: f64,
    pub first_round: Vec<Option<usize>>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub reached_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub rounds: Vec<RoundSummary>,
    pub goal: Option<GoalSummary>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub fn summarize_runs(runs: &[Vec<RoundLog>], goal: Option<f64>) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to summarize".into()));
    }
    let horizon = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut rounds = Vec::new();
    for t in 0..horizon {
        for name in METRICS {
            let values: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.get(t).and_then(|row| metric(row, name)))
                .collect();
            if values.is_empty() {
                continue;
            }
            let (median, q1, q3) = median_iqr(&values);
            rounds.push(RoundSummary {
                round: t,
                metric: name.into(),
                n: values.len(),
                median,
                q1,
                q3,
            });
        }
    }
    let goal = goal.map(|threshold| {
        let first: Vec<Option<usize>> = runs
            .iter()
            .map(|r| r.iter().find(|row| row.max_return >= threshold).map(|row| row.round))
            .collect();
        let values: Vec<f64> = first.iter().map(|f| f.map_or(f64::INFINITY, |v| v as f64)).collect();
        let (median, q1, q3) = median_iqr(&values);
        GoalSummary {
            threshold,
            reached_fraction: first.iter().filter(|f| f.is_some()).count() as f64 / runs.len() as f64,
            first_round: first,
            median: finite(median),
            q1: finite(q1),
            q3: finite(q3),
        }
    });
    Ok(RunSummary {
        runs: runs.len(),
        rounds,
        goal,
    })
}

pub fn load_runs(paths: &[impl AsRef<Path>]) -> Result<Vec<Vec<RoundLog>>> {
    paths.iter().map(|p| read_csv(p.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: usize, ret: f64) -> RoundLog {
        RoundLog {
            round,
            env_steps: 0,
            mean_return: ret,
            max_return: ret,
            eval_return: ret,
            sigma_exp: 0.0,
            precision_min_eig: 1.0,
            precision_max_eig: 1.0,
            theta_norm: 0.0,
            buffer_len: 0,
            precision_drift: 0.0,
            pm_residual: None,
            sbm_loss: None,
            ibe: None,
        }
    }

    #[test]
    fn summarizes_per_round_and_goal() {
        let runs = vec![
            vec![row(0, 0.0), row(1, 1.0)],
            vec![row(0, 0.0), row(1, 0.0), row(2, 1.0)],
            vec![row(0, 0.0)],
        ];
        let s = summarize_runs(&runs, Some(1.0)).unwrap();
        let r1: Vec<_> = s.rounds.iter().filter(|r| r.round == 1 && r.metric == "mean_return").collect();
        assert_eq!(r1.len(), 1);
        assert_eq!((r1[0].n, r1[0].median), (2, 0.5));
        assert!(s.rounds.iter().all(|r| r.metric != "pm_residual"));
        let g = s.goal.unwrap();
        assert_eq!(g.first_round, vec![Some(1), Some(2), None]);
        assert_eq!(g.median, Some(2.0));
        assert_eq!(g.q3, None);
        assert!((g.reached_fraction - 2.0 / 3.0).abs() < 1e-15);
    }
}
