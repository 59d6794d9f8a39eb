#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use setupx_core::gateway::{ChatBackend, FixtureEmbedder, ScriptedChat};
use setupx_core::orchestrator::{Harness, RunConfig, StaticBackends};
use setupx_core::prompts::Prompts;
use setupx_core::sandbox::{Effect, SimFixture, SimProvider};
use setupx_core::store::XpuStore;
use setupx_core::trajectory::RepoTask;
use setupx_core::xpu::Xpu;

pub const INSTALL_MARKER: &str = "/opt/venv/lib/python3.11/site-packages/lockdemo.pth";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lock_conflict")
}

pub fn lock_task() -> RepoTask {
    let mut t = RepoTask::new("lockdemo", "https://example.com/lockdemo.git", "3f2c1aa");
    t.execution_targets = vec!["poetry run pytest -q".into()];
    t
}

pub fn sandbox_fixture() -> SimFixture {
    SimFixture::from_file(&fixture_dir().join("sandbox.json")).unwrap()
}

/// The lock-conflict fixture with the project-install effect taken out of
/// the successful `poetry install` rule.
pub fn mutated_fixture() -> SimFixture {
    let mut f = sandbox_fixture();
    let mut removed = 0;
    for r in f.rules.iter_mut().filter(|r| r.pattern.starts_with("^poetry install")) {
        let before = r.effects.len();
        r.effects
            .retain(|e| !matches!(e, Effect::Write { path, .. } if path == INSTALL_MARKER));
        removed += before - r.effects.len();
    }
    assert_eq!(removed, 1);
    f
}

pub fn chat(file: &str) -> ScriptedChat {
    ScriptedChat::from_file(&fixture_dir().join(file)).unwrap()
}

pub fn kb() -> Arc<XpuStore> {
    Arc::new(XpuStore::load(&fixture_dir().join("kb.jsonl"), None).unwrap())
}

/// Every query lands closest to the lock-conflict entry.
pub fn embedder() -> FixtureEmbedder {
    FixtureEmbedder::new(4).with_constant(vec![0.9, 0.3, 0.1, 0.0])
}

pub fn harness(out: &Path, fixture: SimFixture, chat: Arc<dyn ChatBackend>, store: Option<Arc<XpuStore>>) -> Harness {
    let cfg = RunConfig {
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    harness_with(cfg, fixture, chat, store)
}

pub fn harness_with(cfg: RunConfig, fixture: SimFixture, chat: Arc<dyn ChatBackend>, store: Option<Arc<XpuStore>>) -> Harness {
    let backends = StaticBackends {
        provider: Arc::new(SimProvider::new(fixture).unwrap()),
        chat,
        embedder: Arc::new(embedder()),
    };
    Harness::new(cfg, Arc::new(backends), Prompts::default(), store)
}

pub fn poetry_lock_conflict() -> Xpu {
    serde_json::from_value(serde_json::json!({
        "id": "xpu_poetry_lock_conflict",
        "signals": {
            "keywords": ["poetry.lock", "pyproject.toml", "dependency conflict"],
            "regex": ["Because .* depends on .*", "version solving failed"],
            "situation_triggers": ["Poetry-managed project where manual pip fallback risks losing the lock graph"]
        },
        "advice_nl": [
            "Do not bypass Poetry with manual pip installation.",
            "Preserve the locked dependency graph and resolve the conflict inside Poetry.",
            "Run Poetry installation end-to-end after checking the lock file."
        ],
        "atoms": [
            {"name": "inspect_file", "args": {"path": "pyproject.toml"}},
            {"name": "inspect_file", "args": {"path": "poetry.lock"}},
            {"name": "shell", "args": {"cmd": "poetry install --no-interaction"}}
        ],
        "telemetry": {"hits": 63, "successes": 37, "failures": 15}
    }))
    .unwrap()
}
