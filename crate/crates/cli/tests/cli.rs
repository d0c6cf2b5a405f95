use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn e2e_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/e2e/mango.toml")
}

fn mango(args: &[&str], work: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mango"))
        .args(args)
        .arg("--config")
        .arg(e2e_config())
        .arg("--work-dir")
        .arg(work)
        .output()
        .unwrap()
}

#[test]
fn invalid_threshold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mango(&["consolidate", "--threshold", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("consolidation.distance_threshold"));
}

#[test]
fn missing_input_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mango(&["filter"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[retrieval]\nk = 2\nfloor = 0.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mango"))
        .args(["index", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("retrieval.floor"));
}

#[test]
fn replay_run_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate", "filter", "consolidate", "index", "dialogue"] {
        let out = mango(&[stage], dir.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["kb.jsonl", "index.bin", "eval_bundle.jsonl", "eval_bundle.key.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let out = mango(&["stats"], dir.path());
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["Step 1a", "Step 1b", "Step 2a", "Step 2b"] {
        assert!(table.contains(row), "{table}");
    }
}
