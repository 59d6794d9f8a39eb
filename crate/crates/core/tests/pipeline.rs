mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde_json::json;

use setupx_core::adjudication::FailureCategory;
use setupx_core::distiller::{embedding_text, DistillerConfig};
use setupx_core::gateway::{ChatBackend, EmbeddingBackend, FixtureEmbedder, Gateway, Llm, Role, ScriptedChat};
use setupx_core::kb_tools::{generate_noise, ingest_noise, NoiseConfig, NoiseTemplates};
use setupx_core::orchestrator::{distill_batch, Backends, RunConfig, RunRecord};
use setupx_core::prompts::Prompts;
use setupx_core::sandbox::{SandboxProvider, SimProvider};
use setupx_core::store::XpuStore;
use setupx_core::trajectory::RepoTask;
use setupx_core::xpu::{Telemetry, Xpu, XpuId};

use common::*;

fn task(name: &str) -> RepoTask {
    let mut t = lock_task();
    t.name = name.into();
    t
}

/// Healthy or mutated fixture by task name, with a fresh script per task.
struct PerTask;

impl Backends for PerTask {
    fn sandbox(&self, task: &RepoTask) -> Result<Arc<dyn SandboxProvider>, String> {
        let f = if task.name.starts_with("broken") { mutated_fixture() } else { sandbox_fixture() };
        Ok(Arc::new(SimProvider::new(f).map_err(|e| e.to_string())?))
    }

    fn chat(&self, task: &RepoTask) -> Result<Arc<dyn ChatBackend>, String> {
        let file = if task.name.starts_with("broken") { "chat_mutated.json" } else { "chat.json" };
        Ok(Arc::new(chat(file)))
    }

    fn embedder(&self) -> Arc<dyn EmbeddingBackend> {
        Arc::new(embedder())
    }
}

#[test]
fn batch_results_do_not_depend_on_parallelism() {
    let tasks: Vec<RepoTask> = ["ok-a", "broken-a", "ok-b", "broken-b", "ok-c", "ok-a"].iter().map(|n| task(n)).collect();
    let mut outcomes = Vec::new();
    for workers in [1, 4] {
        let out = tempfile::tempdir().unwrap();
        let store = kb();
        let cfg = RunConfig {
            output_dir: out.path().to_path_buf(),
            ..RunConfig::default()
        };
        let h = setupx_core::orchestrator::Harness::new(cfg, Arc::new(PerTask), Prompts::default(), Some(store.clone()));
        let (summary, records) = h.run_batch(&tasks, workers);
        assert_eq!(summary.total, 6);
        assert_eq!(summary.passed, 4);
        assert_eq!(summary.categories[&FailureCategory::C3], 2);
        let ids: Vec<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, ["ok-a", "broken-a", "ok-b", "broken-b", "ok-c", "ok-a-2"]);
        let flags: Vec<(String, bool, Vec<FailureCategory>)> =
            records.iter().map(|r| (r.run_id.clone(), r.pass, r.categories.clone())).collect();
        let tel = store.telemetry(&XpuId::new("xpu_poetry_lock_conflict")).unwrap();
        assert_eq!(tel, Telemetry::new(63 + 6, 37 + 6, 15));
        outcomes.push((flags, tel));
    }
    assert_eq!(outcomes[0], outcomes[1]);
}

fn distill_chat() -> (Arc<ScriptedChat>, FixtureEmbedder) {
    let near: Xpu = serde_json::from_value(json!({
        "signals": {"keywords": ["poetry.lock", "content-hash"], "situation_triggers": ["poetry refuses a stale lock file"]},
        "advice_nl": ["Regenerate the lock with Poetry before installing."],
        "atoms": [{"name": "shell", "args": {"cmd": "poetry lock --no-update"}}]
    }))
    .unwrap();
    let far_a: Xpu = serde_json::from_value(json!({
        "signals": {"keywords": ["site-packages"], "situation_triggers": ["project reported installed but not importable"]},
        "advice_nl": ["Confirm the project itself imports after installing dependencies."],
        "atoms": [{"name": "shell", "args": {"cmd": "python -c 'import {pkg}'"}}]
    }))
    .unwrap();
    let far_b: Xpu = serde_json::from_value(json!({
        "signals": {"keywords": ["console script"], "situation_triggers": ["documented entry point missing from PATH"]},
        "advice_nl": ["Run the README entry point once before finishing."],
        "atoms": []
    }))
    .unwrap();

    let mut emb = FixtureEmbedder::new(4);
    emb.insert(embedding_text(&near), vec![0.98, 0.199, 0.0, 0.0]);
    emb.insert(embedding_text(&far_a), vec![0.0, 0.0, 0.0, 1.0]);
    emb.insert(embedding_text(&far_b), vec![0.0, 0.6, 0.0, 0.8]);

    let chat = Arc::new(ScriptedChat::new());
    let push = |v: serde_json::Value| chat.push_json(Role::Distiller, &v);
    // healthy run: one pair, one candidate, confirmed duplicate
    push(json!({"pairs": [{"problem": {"step": 1, "error": "version solving failed"},
                          "fix": {"step": 2, "action": "poetry lock --no-update && poetry install"},
                          "confidence": 0.9}]}));
    push(json!({"xpus": [near]}));
    push(json!({"duplicate": true, "fused_advice": []}));
    // mutated run: the charge explains two lessons, one pair pointing past the end is dropped
    push(json!({"pairs": [
        {"problem": {"step": 1, "error": "version solving failed"}, "fix": {"step": 2, "action": "refresh lock"}, "confidence": 1.4},
        {"problem": {"step": 2, "error": "lockdemo not importable"}, "fix": {"step": 3, "action": "import check"}, "confidence": 0.7},
        {"problem": {"step": 3, "error": "x"}, "fix": {"step": 99, "action": "y"}, "confidence": 0.5}
    ]}));
    push(json!({"xpus": [far_a, far_b, {"advice_nl": []}]}));
    (chat, emb)
}

#[test]
fn distill_batch_counts_add_up() {
    let out = tempfile::tempdir().unwrap();
    let h = harness(out.path(), sandbox_fixture(), Arc::new(chat("chat.json")), Some(kb()));
    let healthy = h.run_with_id(&lock_task(), "healthy").record;
    let h = harness(out.path(), mutated_fixture(), Arc::new(chat("chat_mutated.json")), Some(kb()));
    let broken = h.run_with_id(&lock_task(), "broken").record;
    let missing = RunRecord::harness_error("lost", &lock_task(), "provisioning failed".into());
    assert!(healthy.pass && !broken.pass);

    let store = kb();
    let (chat, emb) = distill_chat();
    let gw = Arc::new(Gateway::new(chat.clone(), Arc::new(emb)));
    let llm = Llm::new(gw.clone(), "distill");
    let report = distill_batch(&[healthy, broken, missing], &store, &llm, &Prompts::default(), &DistillerConfig::default());

    assert_eq!(report.errors.len(), 1, "{:?}", report.errors);
    assert_eq!(report.runs.len(), 2);
    assert_eq!((report.new, report.merged), (2, 1));
    let per_run: usize = report.runs.iter().map(|(_, r)| r.actions.len()).sum();
    assert_eq!(per_run, report.new + report.merged);
    assert_eq!(store.len(), 3 + report.new);
    assert_eq!(chat.remaining(Role::Distiller), 0);

    let (_, second) = &report.runs[1];
    assert_eq!(second.pairs.len(), 2);
    assert_eq!(second.pairs[0].confidence, 1.0);
    assert_eq!(second.candidates.len(), 2);
    for a in &second.actions {
        let e = store.get(&a.xpu_id).unwrap();
        assert_eq!(e.xpu.telemetry, Telemetry::ZERO);
        assert_eq!(e.xpu.provenance, vec!["lockdemo".to_string()]);
    }
    let merged = store.get(&XpuId::new("xpu_poetry_lock_conflict")).unwrap();
    assert!(merged.xpu.signals.keywords.contains(&"content-hash".to_string()));
    assert!(merged.xpu.provenance.contains(&"lockdemo".to_string()));
    assert_eq!(merged.xpu.advice_nl.len(), 4);
}

#[test]
fn pruning_a_repository_leaves_nothing_derived_from_it() {
    let store = XpuStore::new(8);
    for i in 0..40usize {
        let x: Xpu = serde_json::from_value(json!({
            "id": format!("xpu_{i:03}"),
            "signals": {"keywords": [format!("k{i}")], "situation_triggers": [format!("s{i}")]},
            "advice_nl": [format!("advice {i}")],
            "atoms": [{"name": "shell", "args": {"cmd": format!("echo {i}")}}],
            "provenance": [format!("repo-{}", i % 5)]
        }))
        .unwrap();
        let mut v = vec![0.1; 8];
        v[i % 8] = 1.0;
        store.ingest(x, v).unwrap();
    }
    let cfg = NoiseConfig {
        context_perturbation: 40,
        cross_grafting: 60,
        generalization_blur: 30,
        ..NoiseConfig::default()
    };
    let noise = generate_noise(&store, &cfg, &NoiseTemplates::default()).unwrap();
    ingest_noise(&store, &noise).unwrap();

    let held_out = "repo-3".to_string();
    let tainted: BTreeSet<String> = store
        .entries()
        .iter()
        .filter(|e| e.xpu.id.as_str().len() == 7 && e.xpu.provenance.contains(&held_out))
        .flat_map(|e| e.xpu.advice_nl.clone())
        .collect();
    let removed = store.prune_provenance(std::slice::from_ref(&held_out));
    assert!(removed.len() > 8);
    for e in store.entries() {
        assert!(!e.xpu.provenance.contains(&held_out), "{} still names the held-out repo", e.xpu.id);
        for a in &e.xpu.advice_nl {
            assert!(!tainted.contains(a), "{} carries advice from the held-out repo", e.xpu.id);
        }
    }
}
