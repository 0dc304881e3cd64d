use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn cdraft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdraft")).args(args).output().expect("binary runs")
}

fn small_scenario(dir: &Path, protocol: &str, extra: &str) -> PathBuf {
    let path = dir.join(format!("{protocol}.toml"));
    let text = format!(
        r#"
[run]
protocol = "{protocol}"
seed = 4

[topology]
domains = 3
nodes_per_domain = 3

[latency]
inter_ms = 15.0

[workload]
kind = "A"
ops_per_client = 40
key_count = 20
{extra}
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_records_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), "cdraft", "");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = cdraft(&["run", "--scenario", s.to_str().unwrap(), "--format", "records", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ja = std::fs::read(&a).unwrap();
    assert_eq!(ja, std::fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(v["overall"]["count"], 120);
    assert_eq!(v["seed"], 4);
}

#[test]
fn seed_flag_overrides_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), "raft", "");
    let o = cdraft(&["run", "--scenario", s.to_str().unwrap(), "--seed", "99", "--format", "records"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 99);
    assert_eq!(v["protocol"], "raft");
}

#[test]
fn self_compare_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), "cdraft", "");
    let p = s.to_str().unwrap();
    let o = cdraft(&["compare", "--scenario", p, p, "--format", "records"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for m in v["metrics"].as_array().unwrap() {
        assert_eq!(m["reduction_pct"], 0.0, "{m}");
    }
}

#[test]
fn compare_table_lists_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_scenario(dir.path(), "raft", "");
    let b = small_scenario(dir.path(), "cdraft", "");
    let o = cdraft(&["compare", "--scenario", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("write.mean_ms"));
    assert!(text.contains("overall.p99_ms"));
}

#[test]
fn optimize_worked_instance() {
    let dir = scenarios();
    let o = cdraft(&[
        "optimize",
        "--latency",
        dir.join("latency.toml").to_str().unwrap(),
        "--load",
        dir.join("load.toml").to_str().unwrap(),
        "--format",
        "records",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["chosen"], 2);
    assert_eq!(v["total"], 12000.0);
}

#[test]
fn optimize_excludes_unavailable_domains() {
    let dir = tempfile::tempdir().unwrap();
    let lat = dir.path().join("lat.json");
    let load = dir.path().join("load.toml");
    std::fs::write(&lat, r#"{"matrix": [[0, 10, 20], [10, 0, 15], [20, 15, 0]], "unavailable": [2]}"#).unwrap();
    std::fs::write(&load, "writes = [100, 100, 100]\nreads = [100, 100, 100]\n").unwrap();
    let o = cdraft(&["optimize", "--latency", lat.to_str().unwrap(), "--load", load.to_str().unwrap(), "--format", "records"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let candidates: Vec<u64> = v["candidates"].as_array().unwrap().iter().map(|c| c["domain"].as_u64().unwrap()).collect();
    assert_eq!(candidates, vec![1, 3]);
}

#[test]
fn check_finds_mutated_commit_rule() {
    let o = cdraft(&["check", "--mutate", "--ops", "1", "--depth", "8", "--drops", "0", "--crashes", "0", "--timeouts", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("VIOLATION"));
    assert!(text.contains("send c2.0 n1.0 ClientWrite"));
}

#[test]
fn check_small_bounds_clean() {
    let o = cdraft(&["check", "--domains", "2", "--nodes", "1", "--depth", "8", "--deepen"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("exhaustive to depth 8 of 8"));
}

#[test]
fn check_scenario_runs_monitors() {
    let o = cdraft(&["check", "--scenario", scenarios().join("lossy-with-crash.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8(o.stdout).unwrap().contains("linearizable true"));
}

#[test]
fn trace_dumps_parseable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_scenario(dir.path(), "cdraft", "");
    let out = dir.path().join("trace.txt");
    let o = cdraft(&["trace", "--scenario", s.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.lines().count() > 100);
    assert!(text.lines().all(|l| cdraft::simnet::TraceRecord::parse(l).is_some()));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(cdraft(&["run", "--scenario", missing.to_str().unwrap()]).status.code(), Some(2));
    let bad = small_scenario(dir.path(), "cdraft", "bogus_field = 1");
    let o = cdraft(&["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("bogus_field"));
    let migrate = small_scenario(dir.path(), "raft", "[placement]\nmigrate = true");
    assert_eq!(cdraft(&["run", "--scenario", migrate.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bundled_scenarios_parse() {
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap();
        if name == "latency.toml" || name == "load.toml" {
            continue;
        }
        cdraft::harness::Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
