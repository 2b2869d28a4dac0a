use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rcnet_core::NeckConfig;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rcnet"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> (Output, Value) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = bin().args(args).arg("--out").arg(&out).output().unwrap();
    let report = std::fs::read_to_string(&out)
        .map(|s| serde_json::from_str(&s).unwrap())
        .unwrap_or(Value::Null);
    (o, report)
}

#[test]
fn shipped_configs_match_constructors() {
    for (name, want) in [("desk", NeckConfig::desk()), ("tiny", NeckConfig::tiny())] {
        let got = NeckConfig::from_json_file(&configs().join(format!("{name}.json"))).unwrap();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn forward_is_deterministic_per_seed() {
    let cfg = configs().join("tiny.json");
    let cfg = cfg.to_str().unwrap();
    let (a, ra) = run(&["forward", "rcnet", "--config", cfg, "--seed", "7"]);
    let (_, rb) = run(&["forward", "rcnet", "--config", cfg, "--seed", "7"]);
    let (_, rc) = run(&["forward", "rcnet", "--config", cfg, "--seed", "8"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(ra["digests"], rb["digests"]);
    assert_ne!(ra["digests"]["pyramid"], rc["digests"]["pyramid"]);
    assert_eq!(ra["config"]["seed"], 7);
    assert_eq!(ra["all_pass"], true);
}

#[test]
fn forward_reads_generated_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fpz = dir.path().join("b.fpz");
    let fpz = fpz.to_str().unwrap();
    let cfg = configs().join("tiny.json");
    let cfg = cfg.to_str().unwrap();
    let (g, rg) = run(&["gen-fixtures", "--config", cfg, "--fixture", fpz]);
    assert!(g.status.success());
    assert_eq!(rg["checks"]["fixtures.round_trip"]["pass"], true);
    let (from_file, ra) = run(&["forward", "fpn", "--config", cfg, "--fixture", fpz]);
    let (_, rb) = run(&["forward", "fpn", "--config", cfg]);
    assert!(from_file.status.success());
    assert_eq!(ra["digests"], rb["digests"]);
}

#[test]
fn invariants_pass_across_shift_ratios_on_tiny() {
    let cfg = configs().join("tiny.json");
    let base: serde_json::Map<String, Value> =
        serde_json::from_str(&std::fs::read_to_string(cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for r in [1, 2, 4, 8] {
        let mut c = base.clone();
        c.insert("channels".into(), 32.into());
        c.insert("shift_ratio".into(), r.into());
        let path = dir.path().join(format!("r{r}.json"));
        std::fs::write(&path, serde_json::to_string(&c).unwrap()).unwrap();
        let (o, rep) = run(&["invariants", "--config", path.to_str().unwrap()]);
        assert!(
            o.status.success(),
            "r={r}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(rep["all_pass"], true);
    }
}

#[test]
fn count_reports_free_scale_shift() {
    let (o, rep) = run(&[
        "count",
        "--config",
        configs().join("tiny.json").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let row = &rep["counts"]["rows"]["csn.scale_shift"];
    assert_eq!(row["params"], 0);
    assert_eq!(row["macs"], 0);
}

#[test]
fn check_filter_runs_only_named_checks() {
    let (o, rep) = run(&["invariants", "--checks", "shift.bijection,shift.empty_plan"]);
    assert!(o.status.success());
    assert_eq!(rep["checks"].as_object().unwrap().len(), 2);
    let (o, _) = run(&["invariants", "--checks", "shift.nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_nonzero() {
    let o = bin().arg("--bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = bin().args(["forward", "nope"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .args(["count", "--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reps_floor_is_enforced() {
    let (o, rep) = run(&[
        "bench-shift",
        "--reps",
        "10",
        "--checks",
        "bench.reps,bench.equality",
    ]);
    assert!(o.status.success());
    assert_eq!(rep["bench"]["reps"], 10);
    let (o, rep) = run(&["bench-shift", "--reps", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(rep, Value::Null);
}
