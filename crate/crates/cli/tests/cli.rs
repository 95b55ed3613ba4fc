use std::path::Path;
use std::process::{Command, Output};

use vpt_core::harness::Manifest;
use vpt_core::testkit::write_mock_corpus;

fn vpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpt")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(vpt(&[]).status.code(), Some(1));
    assert_eq!(vpt(&["run-select", "--programs", "many"]).status.code(), Some(1));
    assert_eq!(vpt(&["run-select", "--record", "--replay"]).status.code(), Some(1));
    assert_eq!(vpt(&["run-select"]).status.code(), Some(1), "missing --dataset");
    assert_eq!(vpt(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 2).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"programs": 0}"#).unwrap();
    let out = vpt(&["run-select", "--mock", "--config", s(&bad), "--dataset", s(&c.dataset)]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"nope": 1}"#).unwrap();
    let out = vpt(&["run-select", "--mock", "--config", s(&unknown), "--dataset", s(&c.dataset)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_dataset_exits_2_unless_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 3).unwrap();
    let mut text = std::fs::read_to_string(&c.dataset).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&c.dataset, text).unwrap();
    let base = ["run-select", "--mock", "--config", s(&c.config), "--dataset", s(&c.dataset)];
    let out = vpt(&base);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
    let mut lenient = base.to_vec();
    lenient.push("--lenient");
    let out = vpt(&lenient);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = Manifest::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(m.records.len(), 3);
}

#[test]
fn replay_miss_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 2).unwrap();
    let out = vpt(&["run-select", "--mock", "--replay", "--config", s(&c.config), "--dataset", s(&c.dataset)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chat/"));
}

#[test]
fn select_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 10).unwrap();
    let manifest = dir.path().join("m.jsonl");
    let out = vpt(&[
        "run-select",
        "--mock",
        "--config",
        s(&c.config),
        "--dataset",
        s(&c.dataset),
        "--out",
        s(&manifest),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = Manifest::parse(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m.header.command, "run-select");
    assert_eq!(m.records.len(), 10);
    assert_eq!(m.summary.metrics.accuracy, 1.0);

    let out = vpt(&["report", "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["metrics"]["records"], 10);
    assert_eq!(v["metrics"]["accuracy"], 1.0);

    std::fs::write(&manifest, "{}\n").unwrap();
    assert_eq!(vpt(&["report", "--manifest", s(&manifest)]).status.code(), Some(2));
}

#[test]
fn refuse_and_reprompt_record_their_policy() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 5).unwrap();
    let run = |cmd: &str, theta: &str| {
        let out = vpt(&[cmd, "--mock", "--theta", theta, "--config", s(&c.config), "--dataset", s(&c.dataset)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        Manifest::parse(&String::from_utf8(out.stdout).unwrap()).unwrap()
    };
    let refused = run("run-refuse", "1.01");
    assert!(refused.records.iter().all(|r| r.refusal.as_ref().unwrap().refused));
    assert_eq!(refused.header.config.refusal.threshold, 1.01);
    let reprompted = run("run-reprompt", "0.7");
    assert!(reprompted.records.iter().all(|r| r.reprompt.is_some()));
}

#[test]
fn test_and_reward_commands_emit_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_mock_corpus(dir.path(), 5).unwrap();
    for cmd in ["gen-tests", "sample", "synth"] {
        let out = vpt(&[cmd, "--mock", "--config", s(&c.config), "--dataset", s(&c.dataset)]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert_eq!(text.lines().count(), 5, "{cmd}");
        for l in text.lines() {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
    }
    let out = vpt(&["emit-rewards", "--mock", "--reward", "correctness", "--config", s(&c.config), "--dataset", s(&c.dataset)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // three fixture programs per record
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r["raw_reward"] == 0.0 || r["raw_reward"] == 1.0));
    let bad = vpt(&["emit-rewards", "--mock", "--reward", "bogus", "--dataset", s(&c.dataset)]);
    assert_eq!(bad.status.code(), Some(1));
}
