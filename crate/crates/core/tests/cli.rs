use std::path::PathBuf;
use std::process::Command;

fn bbm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bbm"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bbm-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn selftest_exits_zero() {
    let out = bbm().arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bbm().args(["median", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_values_exit_two() {
    for args in [
        &["median", "--reps", "0"][..],
        &["median", "--dt", "-1"],
        &["tail", "--y", "10"],
        &["fluctuation", "--t", "4"],
    ] {
        let out = bbm().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn cap_overflow_exits_one() {
    let dir = scratch("cap");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"cap": 10, "reps": 20}"#).unwrap();
    let out = bbm()
        .args(["median", "--t", "3,4,5", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn median_writes_json_and_csv() {
    let dir = scratch("median");
    let out = bbm()
        .args(["median", "--t", "4,6,8,10", "--reps", "200", "--dt", "0.02", "--seed", "7", "--out"])
        .arg(dir.join("report.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let fit = &json["fits"][0]["fit"];
    assert!(fit["slope"].is_number() && fit["slope_se"].is_number());
    assert_eq!(json["config"]["seed"], 7);
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("experiment,t,y,estimate,stderr,n\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("median/median,")).count(), 4);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn config_file_overridden_by_flags() {
    let dir = scratch("overlay");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"t": [5.0], "samples": 1000, "seed": 3}"#).unwrap();
    let run = |extra: &[&str]| {
        let out = bbm().args(["lemmas", "--config"]).arg(&cfg).args(extra).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()
    };
    let a = run(&[]);
    assert_eq!(a["config"]["seed"], 3);
    assert_eq!(a["config"]["samples"], 1000);
    let b = run(&["--seed", "4", "--t", "10"]);
    assert_eq!(b["config"]["seed"], 4);
    assert_eq!(b["config"]["t"][0].as_f64(), Some(10.0));
    std::fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    let out = bbm().args(["lemmas", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn reports_are_byte_identical_apart_from_wall_clock() {
    let run = || {
        let out = bbm()
            .args(["tail", "--t", "5", "--y", "0,1", "--reps", "300", "--seed", "11"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        let mut v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["wall_clock_seconds"] = serde_json::Value::Null;
        v.to_string()
    };
    assert_eq!(run(), run());
}

#[test]
fn tree_dump_is_ndjson() {
    let dir = scratch("dump");
    let path = dir.join("tree.ndjson");
    let out = bbm().args(["median", "--t", "2", "--dump-tree"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().count() >= 1);
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["id"].is_number());
    }
    std::fs::remove_dir_all(dir).unwrap();
}
