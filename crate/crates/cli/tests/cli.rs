use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/lock_conflict")
}

fn setupx(dir: &Path, args: &[&str]) -> (bool, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_setupx"))
        .arg("--config")
        .arg(dir.join("setupx.toml"))
        .args(args)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    assert!(out.status.success() || value.is_null(), "{}", String::from_utf8_lossy(&out.stderr));
    (out.status.success(), value)
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    std::fs::copy(fx.join("kb.jsonl"), dir.path().join("kb.jsonl")).unwrap();
    std::fs::write(dir.path().join("embed.json"), r#"{"*": [0.9, 0.3, 0.1, 0.0]}"#).unwrap();
    let toml = format!(
        r#"output_dir = "{out}"
kb = "{kb}"

[backends.sandbox]
kind = "simulator"
fixture = "{fx}/sandbox.json"

[backends.chat]
kind = "scripted"
script = "{fx}/chat.json"

[backends.embedding]
kind = "fixture"
dim = 4
fixture = "{emb}"
"#,
        out = dir.path().join("runs").display(),
        kb = dir.path().join("kb.jsonl").display(),
        fx = fx.display(),
        emb = dir.path().join("embed.json").display(),
    );
    std::fs::write(dir.path().join("setupx.toml"), toml).unwrap();
    dir
}

#[test]
fn run_writes_a_passing_record_and_updates_the_store() {
    let dir = workspace();
    let (ok, record) = setupx(
        dir.path(),
        &["run", "--repo", "https://example.com/lockdemo.git", "--revision", "3f2c1aa", "--name", "lockdemo", "--target", "poetry run pytest -q"],
    );
    assert!(ok);
    assert_eq!(record["pass"], Value::Bool(true), "{record:#}");
    assert!(dir.path().join("runs/lockdemo/trajectory.jsonl").is_file());

    let (ok, stats) = setupx(dir.path(), &["kb", "stats"]);
    assert!(ok);
    assert_eq!(stats["entries"], 3, "{stats:#}");
    let kb = std::fs::read_to_string(dir.path().join("kb.jsonl")).unwrap();
    let lock: Value = kb
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .map(|v| v["xpu"].clone())
        .find(|x| x["id"] == "xpu_poetry_lock_conflict")
        .unwrap();
    assert_eq!(lock["telemetry"]["hits"], 64, "{lock:#}");
    assert_eq!(lock["telemetry"]["successes"], 38);
}

#[test]
fn prune_removes_entries_by_provenance() {
    let dir = workspace();
    let (ok, removed) = setupx(dir.path(), &["kb", "prune", "--repos", "poetry-demo"]);
    assert!(ok);
    assert_eq!(removed, serde_json::json!(["xpu_poetry_lock_conflict"]));
    let (_, stats) = setupx(dir.path(), &["kb", "stats"]);
    assert_eq!(stats["entries"], 2);
}
