//! Instance files, verification suites, training runs and reports behind
//! the command-line tool.

pub mod benchmark;
pub mod instance;
pub mod report;
pub mod spectral_run;
pub mod tolerances;
pub mod train;
pub mod verify;

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};

pub use benchmark::{deep_sea_benchmark, ArmReport, BenchmarkReport, BenchmarkSettings};
pub use instance::{Instance, InstanceFile, InstanceSpec};
pub use report::{summarize_runs, RunSummary};
pub use spectral_run::{run_spectral, SpectralInit, SpectralMethod, SpectralSettings};
pub use tolerances::Tolerances;
pub use train::{train, TrainConfig, TrainOutcome};
pub use verify::{verify_instance, SvdRelations, VerifyReport, VerifySettings};

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "BELLMAN_LAB_SEED";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Serializes rows with a header line and writes the file atomically.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// SHA-256 of the compact JSON encoding with object keys sorted.
pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let canonical = canonicalize(&serde_json::to_value(config)?);
    let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub residuals: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub suites: Vec<SuiteResult>,
}

impl RunManifest {
    /// Writes the manifest after checking that every artifact exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(missing) = self.artifacts.iter().find(|a| !base.join(a).exists()) {
            return Err(Error::InvalidArgument(format!("manifest artifact {missing} does not exist")));
        }
        write_json(path, self)
    }
}

/// Quantile with linear interpolation between order statistics; infinite
/// entries sort last.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median, first and third quartile.
pub fn median_iqr(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    (quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": 0.5}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": {"x": 0.5, "y": [1, 2]}, "b": 1}"#).unwrap();
        let c: serde_json::Value = serde_json::from_str(r#"{"a": {"x": 0.5, "y": [2, 1]}, "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn quartiles_interpolate() {
        let (m, q1, q3) = median_iqr(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((m, q1, q3), (2.5, 1.75, 3.25));
        let (m, _, q3) = median_iqr(&[1.0, f64::INFINITY, f64::INFINITY]);
        assert!(m.is_infinite() && q3.is_infinite());
    }

    #[test]
    fn manifest_refuses_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let present = dir.path().join("a.csv");
        std::fs::write(&present, "x\n").unwrap();
        let mut m = RunManifest {
            tool_version: TOOL_VERSION.into(),
            config_hash: String::new(),
            seeds: vec![0],
            artifacts: vec!["a.csv".into()],
            suites: vec![],
        };
        m.write(&dir.path().join("manifest.json")).unwrap();
        m.artifacts.push("missing.csv".into());
        assert!(m.write(&dir.path().join("manifest2.json")).is_err());
    }
}
