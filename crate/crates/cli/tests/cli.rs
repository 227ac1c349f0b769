// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.json");
const DEFAULT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");

fn autopatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autopatch"))
        .args(args)
        .env_remove("AUTOPATCH_WORKDIR")
        .output()
        .unwrap()
}

fn tiny(workdir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", TINY, "--workdir", workdir.to_str().unwrap()];
    all.extend_from_slice(args);
    autopatch(&all)
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {text}"))
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(
        o.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    if code != 0 {
        assert_eq!(stderr_json(o)["exit_code"], code);
    }
}

#[test]
fn shipped_default_config_validates() {
    let dir = tempfile::tempdir().unwrap();
    let o = autopatch(&["--config", DEFAULT, "--workdir", dir.path().to_str().unwrap(), "validate-config"]);
    assert_exit(&o, 0);
    let v = stdout_json(&o);
    assert_eq!(v["valid"], true);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);

    // The shipped file spells out the built-in defaults.
    let builtin = autopatch(&["--workdir", dir.path().to_str().unwrap(), "validate-config"]);
    assert_eq!(stdout_json(&builtin)["config_hash"], v["config_hash"]);
}

#[test]
fn usage_errors_exit_2() {
    let o = autopatch(&["validate-config", "--no-such-flag"]);
    assert_exit(&o, 2);
    assert_eq!(stderr_json(&o)["error"], "usage");
    assert_exit(&autopatch(&["--layers", "eight", "validate-config"]), 2);
    assert_exit(&autopatch(&["eval", "--mode", "sometimes"]), 2);
    assert_exit(&autopatch(&[]), 2);
    assert_exit(&autopatch(&["--help"]), 0);
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"n_layers": 2}, "surprise": 1}"#).unwrap();
    let o = autopatch(&["--config", bad.to_str().unwrap(), "validate-config"]);
    assert_exit(&o, 3);
    assert_eq!(stderr_json(&o)["error"], "invalid_config");

    let missing = dir.path().join("nope.json");
    assert_exit(&autopatch(&["--config", missing.to_str().unwrap(), "validate-config"]), 3);
    assert_exit(&tiny(dir.path(), &["--layers", "2:9", "validate-config"]), 3);
    assert_exit(&tiny(dir.path(), &["--seed-override", "weather=1", "validate-config"]), 6);
}

#[test]
fn missing_upstream_artifact_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train-gate", "eval", "sweep-source"] {
        let o = tiny(dir.path(), &[cmd]);
        assert_exit(&o, 4);
        assert_eq!(stderr_json(&o)["error"], "missing_artifact");
    }
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    assert_exit(&tiny(dir.path(), &["train-model"]), 0);
    let before = std::fs::read(dir.path().join("model.apck")).unwrap();
    let o = tiny(dir.path(), &["train-model"]);
    assert_exit(&o, 5);
    assert_eq!(stderr_json(&o)["error"], "would_overwrite");
    assert_exit(&tiny(dir.path(), &["--overwrite", "train-model"]), 0);
    assert_eq!(std::fs::read(dir.path().join("model.apck")).unwrap(), before);
}

#[test]
fn command_chain_reproduces_report() {
    let chain = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let mut hash = None;
    for cmd in ["train-model", "gen-data", "train-gate", "eval"] {
        let o = tiny(chain.path(), &[cmd]);
        assert_exit(&o, 0);
        let v = stdout_json(&o);
        assert!(!v["artifacts"].as_array().unwrap().is_empty());
        assert!(hash.is_none() || hash.as_ref() == Some(&v["config_hash"]));
        hash = Some(v["config_hash"].clone());
    }
    let o = tiny(full.path(), &["report"]);
    assert_exit(&o, 0);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(full.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["config_hash"], hash.unwrap());
    let mut n = 0;
    for stage in manifest["stages"].as_array().unwrap() {
        assert_eq!(stage["status"], "ok");
        for a in stage["artifacts"].as_array().unwrap() {
            let rel = a["path"].as_str().unwrap();
            assert_eq!(
                std::fs::read(chain.path().join(rel)).unwrap(),
                std::fs::read(full.path().join(rel)).unwrap(),
                "{rel}"
            );
            n += 1;
        }
    }
    assert!(n >= 10);

    // Per-mode evaluation against the same trained artifacts.
    assert_exit(&tiny(chain.path(), &["eval", "--mode", "baseline"]), 5);
    assert_exit(&tiny(chain.path(), &["--overwrite", "eval", "--mode", "baseline"]), 0);
    assert_exit(&tiny(chain.path(), &["--overwrite", "eval", "--mode", "always_false"]), 0);
    assert_eq!(
        std::fs::read(chain.path().join("answers_baseline.jsonl")).unwrap(),
        std::fs::read(chain.path().join("answers_always_false.jsonl")).unwrap()
    );
    let single: Value =
        serde_json::from_str(&std::fs::read_to_string(chain.path().join("eval_always_false.json")).unwrap()).unwrap();
    assert_eq!(single["results"].as_array().unwrap().len(), 1);

    assert_exit(&tiny(chain.path(), &["sweep-distance"]), 0);
    let csv = std::fs::read_to_string(chain.path().join("sweep_distance.csv")).unwrap();
    assert!(csv.starts_with("source_layer,target_layer,distance,solve_rate,gate_accuracy,n_prompts,seed"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn seed_overrides_and_workdir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let base = stdout_json(&tiny(dir.path(), &["validate-config"]));
    let over = stdout_json(&tiny(dir.path(), &["--seed-override", "train=3", "validate-config"]));
    assert_ne!(base["config_hash"], over["config_hash"]);
    let layers = stdout_json(&tiny(dir.path(), &["--layers", "2:1", "validate-config"]));
    assert_ne!(base["config_hash"], layers["config_hash"]);

    let env_dir = dir.path().join("from-env");
    let via_env = Command::new(env!("CARGO_BIN_EXE_autopatch"))
        .args(["--config", TINY, "validate-config"])
        .env("AUTOPATCH_WORKDIR", &env_dir)
        .output()
        .unwrap();
    assert_exit(&via_env, 0);
    assert_eq!(stdout_json(&via_env)["workdir"], env_dir.to_str().unwrap());
    assert_eq!(stdout_json(&via_env)["config_hash"], base["config_hash"]);

    let flag_dir = dir.path().join("from-flag");
    let via_flag = Command::new(env!("CARGO_BIN_EXE_autopatch"))
        .args(["--config", TINY, "--workdir", flag_dir.to_str().unwrap(), "validate-config"])
        .env("AUTOPATCH_WORKDIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(stdout_json(&via_flag)["workdir"], flag_dir.to_str().unwrap());
}
