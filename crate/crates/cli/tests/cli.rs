use std::path::Path;
use std::process::{Command, Output};

use bellman_lab::agent::RoundLog;
use bellman_lab::harness::report::RunSummary;
use bellman_lab::harness::train::FinalState;
use bellman_lab::harness::{read_csv, Instance, RunManifest, VerifyReport};
use bellman_lab::ibe::IbeReport;
use bellman_lab::io::read_json;
use bellman_lab::spectral::TraceRow;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bellman-lab"));
    cmd.env_remove("BELLMAN_LAB_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_linear(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("linear.json");
    let out = run(&["gen", "--kind", "linear", "--states", "8", "--actions", "2", "--dim", "3", "--seed", "5", "--out", p(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn one_hot_features_on_a_short_chain_have_no_bellman_error() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("chain.json");
    let report = dir.path().join("ibe.json");
    assert_eq!(code(&run(&["gen", "--kind", "chain", "--length", "1", "--out", p(&inst)])), 0);
    assert_eq!(code(&run(&["ibe", "--instance", p(&inst), "--out", p(&report)])), 0);
    let r: IbeReport<f64> = read_json(&report).unwrap();
    assert!(r.value <= 1e-10, "{}", r.value);
    Instance::load(&inst).unwrap();
}

#[test]
fn verify_passes_on_factory_instance_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_linear(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&run(&["verify", "--instance", p(&inst), "--out", p(&a)])), 0);
    assert_eq!(code(&run(&["verify", "--instance", p(&inst), "--out", p(&b)])), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let report: VerifyReport = read_json(&a).unwrap();
    assert!(report.passed);
    assert!(report.checks.iter().all(|c| c.value <= c.threshold));
}

#[test]
fn verify_exit_code_tracks_gated_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_linear(dir.path());
    let out = dir.path().join("literal.json");
    let res = run(&["verify", "--instance", p(&inst), "--svd-relations", "literal", "--out", p(&out)]);
    assert_eq!(code(&res), 1);
    let report: VerifyReport = read_json(&out).unwrap();
    assert!(!report.passed);
    assert!(report.checks.iter().any(|c| c.value > c.threshold));
}

#[test]
fn missing_input_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("out.json");
    for args in [
        vec!["verify", "--instance", p(&missing), "--out", p(&out)],
        vec!["ibe", "--instance", p(&missing), "--out", p(&out)],
        vec!["spectral", "--instance", p(&missing), "--out", p(&out)],
        vec!["report", p(&missing), "--out", p(&out)],
    ] {
        assert_eq!(code(&run(&args)), 2, "{args:?}");
    }
    let run_dir = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", p(&missing), "--out-dir", p(&run_dir)])), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_subcommand_and_flags_are_usage_errors() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&run(&["gen", "--kind", "chain", "--bogus", "1", "--out", "x.json"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn malformed_instance_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_linear(dir.path());
    let text = std::fs::read_to_string(&inst).unwrap().replacen("\"gamma\": 0.9", "\"gamma\": 1.5", 1);
    std::fs::write(&inst, text).unwrap();
    let out = dir.path().join("v.json");
    assert_eq!(code(&run(&["verify", "--instance", p(&inst), "--out", p(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn spectral_trace_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let inst = gen_linear(dir.path());
    let csv = dir.path().join("trace.csv");
    assert_eq!(code(&run(&["spectral", "--instance", p(&inst), "--method", "sbm", "--iters", "10", "--out", p(&csv)])), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,pm_residual,l1,l2,l_orth,total,lambda_gap,grad_norm");
    let rows: Vec<TraceRow> = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 11);
}

fn write_train_config(dir: &Path) -> std::path::PathBuf {
    let inst = dir.join("chain.json");
    assert_eq!(code(&run(&["gen", "--kind", "chain", "--length", "3", "--slip", "0.1", "--out", p(&inst)])), 0);
    let cfg = dir.join("train.json");
    std::fs::write(
        &cfg,
        r#"{"agent": {"grid_size": 8, "rep_steps": 8, "episodes_per_round": 2, "max_episode_len": 30},
            "rounds": 6, "seeds": [11, 12], "instance": "chain.json"}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn train_and_report_outputs_are_byte_identical_and_reparseable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out-dir", p(&a)])), 0);
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out-dir", p(&b)])), 0);
    for name in ["run_seed11.csv", "run_seed12.csv", "final_seed11.json", "final_seed12.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let rows: Vec<RoundLog> = read_csv(&a.join("run_seed11.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    let fin: FinalState = read_json(&a.join("final_seed12.json")).unwrap();
    assert_eq!(fin.seed, 12);
    let manifest: RunManifest = read_json(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.seeds, vec![11, 12]);
    assert!(manifest.artifacts.iter().all(|x| a.join(x).exists()));
    assert!(manifest.suites.iter().all(|s| s.passed));

    let summary = dir.path().join("summary.json");
    let summary_csv = dir.path().join("summary.csv");
    let res = run(&[
        "report",
        p(&a.join("run_seed11.csv")),
        p(&a.join("run_seed12.csv")),
        "--goal",
        "0.5",
        "--out",
        p(&summary),
        "--csv",
        p(&summary_csv),
    ]);
    assert_eq!(code(&res), 0);
    let s: RunSummary = read_json(&summary).unwrap();
    assert_eq!(s.runs, 2);
    assert_eq!(s.goal.unwrap().first_round.len(), 2);
    assert!(std::fs::read_to_string(&summary_csv).unwrap().starts_with("round,metric,n,median,q1,q3"));
}

#[test]
fn seed_environment_variable_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path());
    let out = dir.path().join("env");
    let res = bin()
        .env("BELLMAN_LAB_SEED", "42")
        .args(["train", "--config", p(&cfg), "--out-dir", p(&out)])
        .output()
        .unwrap();
    assert_eq!(code(&res), 0);
    assert!(out.join("run_seed42.csv").exists());
    assert!(!out.join("run_seed11.csv").exists());
}

#[test]
fn config_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_train_config(dir.path());
    let reordered = dir.path().join("reordered.json");
    std::fs::write(
        &reordered,
        r#"{"instance": "chain.json", "seeds": [11, 12], "rounds": 6,
            "agent": {"max_episode_len": 30, "episodes_per_round": 2, "rep_steps": 8, "grid_size": 8}}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out-dir", p(&a)])), 0);
    assert_eq!(code(&run(&["train", "--config", p(&reordered), "--out-dir", p(&b)])), 0);
    let ma: RunManifest = read_json(&a.join("manifest.json")).unwrap();
    let mb: RunManifest = read_json(&b.join("manifest.json")).unwrap();
    assert_eq!(ma.config_hash, mb.config_hash);
}
