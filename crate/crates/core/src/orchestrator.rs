//! Run configuration, backend wiring, single runs, batches and batch
//! distillation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjudication::{adjudicate, Adjudication, AdjudicationConfig, Decision, FailureCategory};
use crate::agent::{AgentConfig, AgentRun, SetupAgent};
use crate::distiller::{DistillReport, Distiller, DistillerConfig, IngestKind};
use crate::gateway::{
    ChatBackend, EmbeddingBackend, FixtureEmbedder, Gateway, HashEmbedder, Llm, RemoteChat, RemoteEmbedder,
    RetryPolicy, ScriptedChat,
};
use crate::prompts::Prompts;
use crate::retriever::{Retriever, RetrieverConfig};
use crate::sandbox::{DockerConfig, DockerProvider, Sandbox, SandboxProvider, SimFixture, SimProvider};
use crate::store::{XpuStore, DEFAULT_DIMENSION};
use crate::trajectory::{Budgets, Outcome, RepoTask, Trajectory};
use crate::verifier::VerifierConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxKind {
    #[default]
    Simulator,
    Docker,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub kind: SandboxKind,
    /// Simulator fixture; `{task}` is replaced by the task name.
    pub fixture: Option<String>,
    pub docker: DockerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    pub kind: ChatKind,
    /// Scripted responses; `{task}` is replaced by the task name.
    pub script: Option<String>,
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub attempts: u32,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            kind: ChatKind::Scripted,
            script: None,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "SETUPX_API_KEY".into(),
            attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hash,
    Fixture,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub seed: u64,
    /// `{text: vector}` map for the fixture backend.
    pub fixture: Option<String>,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hash,
            dim: DEFAULT_DIMENSION,
            seed: 0,
            fixture: None,
            base_url: "https://api.openai.com/v1".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: "SETUPX_API_KEY".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub sandbox: SandboxConfig,
    pub chat: ChatConfig,
    pub embedding: EmbeddingConfig,
}

impl BackendConfig {
    /// `SETUPX_CHAT_URL`, `SETUPX_CHAT_MODEL`, `SETUPX_EMBED_URL` and
    /// `SETUPX_EMBED_MODEL` replace the configured endpoints.
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(v) = var("SETUPX_CHAT_URL") {
            self.chat.base_url = v;
        }
        if let Some(v) = var("SETUPX_CHAT_MODEL") {
            self.chat.model = v;
        }
        if let Some(v) = var("SETUPX_EMBED_URL") {
            self.embedding.base_url = v;
        }
        if let Some(v) = var("SETUPX_EMBED_MODEL") {
            self.embedding.model = v;
        }
    }
}

/// Agent knobs beyond the budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentTuning {
    pub window: usize,
    pub output_chars: usize,
    pub reparse_retries: usize,
    pub render_ctx: BTreeMap<String, String>,
}

impl Default for AgentTuning {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            window: a.window,
            output_chars: a.output_chars,
            reparse_retries: a.reparse_retries,
            render_ctx: a.render_ctx,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub budgets: Budgets,
    pub xpu_enabled: bool,
    pub retrieval: RetrieverConfig,
    pub agent: AgentTuning,
    pub verifier: VerifierConfig,
    pub adjudication: AdjudicationConfig,
    pub distiller: DistillerConfig,
    pub prompt_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Knowledge-base file.
    pub kb: Option<PathBuf>,
    pub backends: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budgets: Budgets::default(),
            xpu_enabled: true,
            retrieval: RetrieverConfig::default(),
            agent: AgentTuning::default(),
            verifier: VerifierConfig::default(),
            adjudication: AdjudicationConfig::default(),
            distiller: DistillerConfig::default(),
            prompt_dir: None,
            output_dir: PathBuf::from("runs"),
            kb: None,
            backends: BackendConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file; relative paths inside it stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.budgets;
        if !(b.wall_clock > 0.0) {
            return Err(ConfigError::Invalid("budgets.wall_clock must be positive".into()));
        }
        if !(b.command_timeout > 0.0) {
            return Err(ConfigError::Invalid("budgets.command_timeout must be positive".into()));
        }
        let r = &self.retrieval;
        if r.k == 0 || r.n < r.k {
            return Err(ConfigError::Invalid(format!("retrieval needs 0 < k <= n, got k={} n={}", r.k, r.n)));
        }
        r.thresholds.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backends.embedding.dim == 0 {
            return Err(ConfigError::Invalid("embedding.dim must be positive".into()));
        }
        Ok(())
    }

    pub fn prompts(&self) -> std::io::Result<Prompts> {
        match &self.prompt_dir {
            Some(d) => Prompts::from_dir(d),
            None => Ok(Prompts::default()),
        }
    }

    fn agent_config(&self, task: &RepoTask) -> AgentConfig {
        let mut verifier = self.verifier.clone();
        verifier.workdir = task.workdir.clone();
        AgentConfig {
            budgets: self.budgets,
            window: self.agent.window,
            output_chars: self.agent.output_chars,
            reparse_retries: self.agent.reparse_retries,
            verifier,
            render_ctx: self.agent.render_ctx.clone(),
        }
    }
}

/// Source of per-task sandboxes and chat backends.
pub trait Backends: Send + Sync {
    fn sandbox(&self, task: &RepoTask) -> Result<Arc<dyn SandboxProvider>, String>;
    fn chat(&self, task: &RepoTask) -> Result<Arc<dyn ChatBackend>, String>;
    fn embedder(&self) -> Arc<dyn EmbeddingBackend>;
}

/// One provider, chat and embedder for every task.
pub struct StaticBackends {
    pub provider: Arc<dyn SandboxProvider>,
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
}

impl Backends for StaticBackends {
    fn sandbox(&self, _task: &RepoTask) -> Result<Arc<dyn SandboxProvider>, String> {
        Ok(self.provider.clone())
    }

    fn chat(&self, _task: &RepoTask) -> Result<Arc<dyn ChatBackend>, String> {
        Ok(self.chat.clone())
    }

    fn embedder(&self) -> Arc<dyn EmbeddingBackend> {
        self.embedder.clone()
    }
}

/// Backends built from a [`BackendConfig`].
pub struct ConfiguredBackends {
    cfg: BackendConfig,
    docker: Option<Arc<DockerProvider>>,
    remote_chat: Option<Arc<RemoteChat>>,
    embedder: Arc<dyn EmbeddingBackend>,
}

fn per_task(template: &str, task: &RepoTask) -> PathBuf {
    PathBuf::from(template.replace("{task}", &task.name))
}

impl ConfiguredBackends {
    pub fn new(cfg: BackendConfig) -> Result<Self, String> {
        let key = |var: &str| std::env::var(var).ok().filter(|v| !v.is_empty());
        let docker = match cfg.sandbox.kind {
            SandboxKind::Docker => Some(Arc::new(DockerProvider::connect(cfg.sandbox.docker.clone()).map_err(|e| e.to_string())?)),
            SandboxKind::Simulator => None,
        };
        let retry = RetryPolicy {
            attempts: cfg.chat.attempts.max(1),
            ..RetryPolicy::default()
        };
        let remote_chat = match cfg.chat.kind {
            ChatKind::Remote => Some(Arc::new(
                RemoteChat::new(&cfg.chat.base_url, &cfg.chat.model, key(&cfg.chat.api_key_env), retry).map_err(|e| e.to_string())?,
            )),
            ChatKind::Scripted => None,
        };
        let e = &cfg.embedding;
        let embedder: Arc<dyn EmbeddingBackend> = match e.kind {
            EmbeddingKind::Hash => Arc::new(HashEmbedder::new(e.dim, e.seed)),
            EmbeddingKind::Fixture => {
                let path = e.fixture.as_deref().ok_or("embedding.fixture is required for the fixture backend")?;
                Arc::new(FixtureEmbedder::from_file(Path::new(path), Some(e.dim))?.with_fallback(e.seed))
            }
            EmbeddingKind::Remote => Arc::new(
                RemoteEmbedder::new(&e.base_url, &e.model, e.dim, key(&e.api_key_env), retry).map_err(|e| e.to_string())?,
            ),
        };
        Ok(Self {
            cfg,
            docker,
            remote_chat,
            embedder,
        })
    }
}

impl Backends for ConfiguredBackends {
    fn sandbox(&self, task: &RepoTask) -> Result<Arc<dyn SandboxProvider>, String> {
        if let Some(d) = &self.docker {
            return Ok(d.clone());
        }
        let fixture = match &self.cfg.sandbox.fixture {
            Some(t) => SimFixture::from_file(&per_task(t, task))?,
            None => SimFixture::default(),
        };
        Ok(Arc::new(SimProvider::new(fixture).map_err(|e| e.to_string())?))
    }

    fn chat(&self, task: &RepoTask) -> Result<Arc<dyn ChatBackend>, String> {
        if let Some(c) = &self.remote_chat {
            return Ok(c.clone());
        }
        let script = self.cfg.chat.script.as_deref().ok_or("chat.script is required for the scripted backend")?;
        Ok(Arc::new(ScriptedChat::from_file(&per_task(script, task))?))
    }

    fn embedder(&self) -> Arc<dyn EmbeddingBackend> {
        self.embedder.clone()
    }
}

/// The outcome of one task, as written to `record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task: RepoTask,
    pub outcome: Option<Outcome>,
    pub trajectory_path: Option<PathBuf>,
    pub adjudication_path: Option<PathBuf>,
    pub decision: Option<Decision>,
    pub charges: usize,
    pub pass: bool,
    pub categories: Vec<FailureCategory>,
    /// `timeout`, `guilty`, `not_adjudicated` or `harness_error: ...`.
    pub failure: Option<String>,
    pub steps: usize,
    pub elapsed: f64,
}

/// A run passes when it did not time out and the prosecutor filed nothing or
/// every charge was dismissed.
pub fn pass_rule(outcome: Option<Outcome>, adjudication: Option<&Adjudication>) -> bool {
    match (outcome, adjudication) {
        (Some(o), Some(a)) if o != Outcome::Timeout => a.charges.is_empty() || a.decision == Decision::NotGuilty,
        _ => false,
    }
}

impl RunRecord {
    /// Re-derives `pass` from the stored trajectory and adjudication.
    pub fn recompute_pass(&self) -> Result<bool, String> {
        let outcome = match &self.trajectory_path {
            Some(p) => Some(Trajectory::load(p).map_err(|e| e.to_string())?.outcome),
            None => None,
        };
        let adjudication = match &self.adjudication_path {
            Some(p) => Some(Adjudication::load(p).map_err(|e| format!("{}: {e}", p.display()))?),
            None => None,
        };
        Ok(pass_rule(outcome, adjudication.as_ref()))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn harness_error(run_id: &str, task: &RepoTask, msg: String) -> Self {
        Self {
            run_id: run_id.to_string(),
            task: task.clone(),
            outcome: None,
            trajectory_path: None,
            adjudication_path: None,
            decision: None,
            charges: 0,
            pass: false,
            categories: Vec::new(),
            failure: Some(format!("harness_error: {msg}")),
            steps: 0,
            elapsed: 0.0,
        }
    }
}

/// Everything a single run produced, beyond the record.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub run: Option<AgentRun>,
    pub adjudication: Option<Adjudication>,
    pub gateway: Option<Arc<Gateway>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBrief {
    pub run_id: String,
    pub pass: bool,
    pub categories: Vec<FailureCategory>,
    pub failure: Option<String>,
}

/// Aggregate of a batch; independent of timing and parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub passed: usize,
    pub pass_rate: f64,
    /// Failed runs per category; a run with several categories counts in each.
    pub categories: BTreeMap<FailureCategory, usize>,
    pub timeouts: usize,
    pub harness_errors: usize,
    pub runs: Vec<RunBrief>,
}

impl BatchSummary {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut categories: BTreeMap<FailureCategory, usize> = FailureCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for r in records.iter().filter(|r| !r.pass) {
            let distinct: BTreeSet<FailureCategory> = r.categories.iter().copied().collect();
            for c in distinct {
                *categories.entry(c).or_default() += 1;
            }
        }
        let passed = records.iter().filter(|r| r.pass).count();
        Self {
            total: records.len(),
            passed,
            pass_rate: if records.is_empty() { 0.0 } else { passed as f64 / records.len() as f64 },
            categories,
            timeouts: records.iter().filter(|r| r.failure.as_deref() == Some("timeout")).count(),
            harness_errors: records
                .iter()
                .filter(|r| r.failure.as_deref().is_some_and(|f| f.starts_with("harness_error")))
                .count(),
            runs: records
                .iter()
                .map(|r| RunBrief {
                    run_id: r.run_id.clone(),
                    pass: r.pass,
                    categories: r.categories.clone(),
                    failure: r.failure.clone(),
                })
                .collect(),
        }
    }

    /// Failure counts per category as a plain-text table.
    pub fn category_table(&self) -> String {
        let failed = self.total - self.passed;
        let mut out = format!("{:<6} {:<46} {:>6} {:>8}\n", "cat", "description", "runs", "share");
        for (cat, n) in &self.categories {
            let share = if failed == 0 { 0.0 } else { 100.0 * *n as f64 / failed as f64 };
            out.push_str(&format!("{:<6} {:<46} {:>6} {:>7.1}%\n", cat.as_str(), cat.describe(), n, share));
        }
        out.push_str(&format!(
            "pass rate {}/{} = {:.1}%; timeouts {}; harness errors {}\n",
            self.passed,
            self.total,
            100.0 * self.pass_rate,
            self.timeouts,
            self.harness_errors
        ));
        out
    }
}

fn sanitize_id(s: &str) -> String {
    let id: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    if id.is_empty() {
        "run".into()
    } else {
        id
    }
}

/// Runs tasks against shared backends and an optional shared store.
pub struct Harness {
    pub cfg: RunConfig,
    pub backends: Arc<dyn Backends>,
    pub prompts: Arc<Prompts>,
    pub store: Option<Arc<XpuStore>>,
}

impl Harness {
    pub fn new(cfg: RunConfig, backends: Arc<dyn Backends>, prompts: Prompts, store: Option<Arc<XpuStore>>) -> Self {
        Self {
            cfg,
            backends,
            prompts: Arc::new(prompts),
            store,
        }
    }

    fn gateway(&self, task: &RepoTask) -> Result<Arc<Gateway>, String> {
        Ok(Arc::new(Gateway::new(self.backends.chat(task)?, self.backends.embedder())))
    }

    pub fn run_one(&self, task: &RepoTask) -> RunRecord {
        self.run_with_id(task, &sanitize_id(&task.name)).record
    }

    /// Runs setup then adjudication and writes the run directory.
    pub fn run_with_id(&self, task: &RepoTask, run_id: &str) -> RunArtifacts {
        let fail = |msg: String| RunArtifacts {
            record: RunRecord::harness_error(run_id, task, msg),
            run: None,
            adjudication: None,
            gateway: None,
        };
        if let Err(e) = task.validate() {
            return fail(e);
        }
        let dir = self.cfg.output_dir.join(run_id);
        if let Err(e) = std::fs::create_dir_all(&dir) {
            return fail(format!("{}: {e}", dir.display()));
        }
        let provider = match self.backends.sandbox(task) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        let gateway = match self.gateway(task) {
            Ok(g) => g,
            Err(e) => return fail(e),
        };
        let llm = Llm::new(gateway.clone(), run_id);
        let mut sandbox = match provider.provision(&task.base_image, run_id) {
            Ok(b) => Sandbox::with_prefix(b, run_id),
            Err(e) => return fail(format!("provisioning failed: {e}")),
        };

        let mut retriever = match (&self.store, self.cfg.xpu_enabled) {
            (Some(store), true) => Some(Retriever::new(
                store.clone(),
                llm.clone(),
                self.prompts.clone(),
                self.cfg.retrieval.clone(),
            )),
            _ => None,
        };
        let run = SetupAgent::new(&llm, &self.prompts, retriever.as_mut(), self.cfg.agent_config(task)).run(task, &mut sandbox);
        let trajectory = &run.trajectory;
        tracing::info!(run = run_id, outcome = trajectory.outcome.as_str(), steps = trajectory.steps.len(), "setup finished");

        let trajectory_path = dir.join("trajectory.jsonl");
        if let Err(e) = trajectory.save(&trajectory_path) {
            return fail(format!("writing trajectory: {e}"));
        }

        let mut record = RunRecord {
            run_id: run_id.to_string(),
            task: task.clone(),
            outcome: Some(trajectory.outcome),
            trajectory_path: Some(trajectory_path),
            adjudication_path: None,
            decision: None,
            charges: 0,
            pass: false,
            categories: Vec::new(),
            failure: None,
            steps: trajectory.steps.len(),
            elapsed: trajectory.elapsed,
        };

        let adjudication = if trajectory.outcome == Outcome::Timeout {
            record.failure = Some("timeout".into());
            None
        } else {
            match self.adjudicate_sandbox(&llm, &provider, &mut sandbox, trajectory, run_id) {
                Ok(a) => Some(a),
                Err(e) => {
                    record.failure = Some(format!("harness_error: {e}"));
                    None
                }
            }
        };
        drop(sandbox);

        if let Some(a) = &adjudication {
            let path = dir.join("adjudication.json");
            if let Err(e) = a.save(&path) {
                record.failure = Some(format!("harness_error: writing adjudication: {e}"));
            } else {
                record.adjudication_path = Some(path);
            }
            record.decision = Some(a.decision);
            record.charges = a.charges.len();
            record.categories = a.upheld_categories();
        }
        record.pass = record.failure.is_none() && pass_rule(record.outcome, adjudication.as_ref());
        if !record.pass && record.failure.is_none() {
            record.failure = Some(match adjudication.as_ref().map(|a| a.decision) {
                Some(Decision::Guilty) => "guilty".into(),
                _ => "not_adjudicated".into(),
            });
        }
        if let Err(e) = gateway.write_log(&dir.join("chat_log.jsonl")) {
            tracing::warn!(run = run_id, error = %e, "chat log not written");
        }
        if let Err(e) = std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record).unwrap_or_default()) {
            tracing::warn!(run = run_id, error = %e, "record not written");
        }
        RunArtifacts {
            record,
            run: Some(run),
            adjudication,
            gateway: Some(gateway),
        }
    }

    fn adjudicate_sandbox(
        &self,
        llm: &Llm,
        provider: &Arc<dyn SandboxProvider>,
        sandbox: &mut Sandbox,
        trajectory: &Trajectory,
        run_id: &str,
    ) -> Result<Adjudication, String> {
        let image = sandbox.commit(run_id).map_err(|e| format!("commit failed: {e}"))?;
        self.adjudicate_image(llm, provider, &image, trajectory, run_id)
    }

    /// Prosecutor and judge each get their own session of `image`.
    pub fn adjudicate_image(
        &self,
        llm: &Llm,
        provider: &Arc<dyn SandboxProvider>,
        image: &str,
        trajectory: &Trajectory,
        run_id: &str,
    ) -> Result<Adjudication, String> {
        let workdir = trajectory.task.workdir.clone();
        let open = |session: &str| -> Result<Sandbox, String> {
            let b = provider
                .open(image, &format!("{run_id}-{session}"))
                .or_else(|_| provider.provision(image, &format!("{run_id}-{session}")))
                .map_err(|e| format!("opening {image}: {e}"))?;
            let mut s = Sandbox::with_prefix(b, &format!("{run_id}-{session}"));
            s.set_workdir(&workdir).map_err(|e| e.to_string())?;
            Ok(s)
        };
        let mut investigation = open("prosecutor")?;
        let mut review = open("judge")?;
        let mut cfg = self.cfg.adjudication.clone();
        cfg.workdir = workdir;
        Ok(adjudicate(llm, &self.prompts, &cfg, trajectory, &mut investigation, &mut review))
    }

    /// Adjudicates a stored trajectory against an existing image.
    pub fn adjudicate_stored(&self, trajectory: &Trajectory, image: &str) -> Result<Adjudication, String> {
        let run_id = sanitize_id(&trajectory.task.name);
        let provider = self.backends.sandbox(&trajectory.task)?;
        let llm = Llm::new(self.gateway(&trajectory.task)?, run_id.as_str());
        self.adjudicate_image(&llm, &provider, image, trajectory, &run_id)
    }

    /// Runs every task; `parallelism` worker threads share only the store.
    pub fn run_batch(&self, tasks: &[RepoTask], parallelism: usize) -> (BatchSummary, Vec<RunRecord>) {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let ids: Vec<String> = tasks
            .iter()
            .map(|t| {
                let base = sanitize_id(&t.name);
                let n = seen.entry(base.clone()).or_default();
                *n += 1;
                if *n == 1 {
                    base
                } else {
                    format!("{base}-{n}")
                }
            })
            .collect();
        let records: Vec<RunRecord> = match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
            Ok(pool) => pool.install(|| {
                use rayon::prelude::*;
                tasks
                    .par_iter()
                    .zip(ids.par_iter())
                    .map(|(t, id)| self.run_with_id(t, id).record)
                    .collect()
            }),
            Err(e) => {
                tracing::warn!(error = %e, "thread pool unavailable; running sequentially");
                tasks.iter().zip(&ids).map(|(t, id)| self.run_with_id(t, id).record).collect()
            }
        };
        (BatchSummary::from_records(&records), records)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchDistillReport {
    pub new: usize,
    pub merged: usize,
    pub runs: Vec<(String, DistillReport)>,
    pub errors: Vec<String>,
}

/// Distils each record's trajectory and adjudication into `store`, in order.
pub fn distill_batch(
    records: &[RunRecord],
    store: &XpuStore,
    llm: &Llm,
    prompts: &Prompts,
    cfg: &DistillerConfig,
) -> BatchDistillReport {
    let mut report = BatchDistillReport::default();
    let mut distiller = Distiller::new(llm, prompts, cfg.clone());
    for r in records {
        let Some(path) = &r.trajectory_path else {
            report.errors.push(format!("{}: no trajectory", r.run_id));
            continue;
        };
        let trajectory = match Trajectory::load(path) {
            Ok(t) => t,
            Err(e) => {
                report.errors.push(format!("{}: {e}", r.run_id));
                continue;
            }
        };
        let adjudication = match &r.adjudication_path {
            Some(p) => match Adjudication::load(p) {
                Ok(a) => Some(a),
                Err(e) => {
                    report.errors.push(format!("{}: {}: {e}; distilling without it", r.run_id, p.display()));
                    None
                }
            },
            None => None,
        };
        let d = distiller.run(&trajectory, adjudication.as_ref(), store);
        report.new += d.count(IngestKind::IngestedNew);
        report.merged += d.count(IngestKind::MergedInto);
        report.runs.push((r.run_id.clone(), d));
    }
    report
}

/// Tasks from a JSON array or JSON Lines file.
pub fn load_tasks(path: &Path) -> Result<Vec<RepoTask>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let tasks: Vec<RepoTask> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
            .collect::<Result<_, _>>()?
    };
    for t in &tasks {
        t.validate().map_err(|e| format!("task `{}`: {e}", t.name))?;
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_validation() {
        let text = r#"
            xpu_enabled = false
            output_dir = "out"
            [budgets]
            wall_clock = 100.0
            [retrieval]
            mode = "direct"
            [backends.chat]
            kind = "scripted"
            script = "fixtures/{task}/chat.json"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert!(!cfg.xpu_enabled);
        assert_eq!(cfg.budgets.max_steps, 60);
        assert_eq!(cfg.retrieval.k, 3);
        let t = RepoTask::new("demo", "u", "r");
        assert_eq!(per_task(cfg.backends.chat.script.as_deref().unwrap(), &t), PathBuf::from("fixtures/demo/chat.json"));

        let mut bad = cfg.clone();
        bad.budgets.wall_clock = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.retrieval.k = 11;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn summary_counts_each_category_once_per_run() {
        let t = RepoTask::new("a", "u", "r");
        let mut recs: Vec<RunRecord> = (0..4).map(|i| RunRecord::harness_error(&format!("r{i}"), &t, String::new())).collect();
        for r in &mut recs[..3] {
            r.pass = true;
            r.failure = None;
        }
        recs[3].categories = vec![FailureCategory::C3, FailureCategory::C4, FailureCategory::C3];
        let s = BatchSummary::from_records(&recs);
        assert_eq!(s.pass_rate, 0.75);
        assert_eq!(s.categories[&FailureCategory::C3], 1);
        assert_eq!(s.categories[&FailureCategory::C4], 1);
        assert_eq!(s.categories[&FailureCategory::C1], 0);
        assert!(s.category_table().contains("3/4"));
    }

    #[test]
    fn pass_rule_cases() {
        use crate::adjudication::Verdict;
        let clean = Adjudication::new(Vec::new(), Verdict::new(Vec::new()), Vec::new());
        assert!(pass_rule(Some(Outcome::Finished), Some(&clean)));
        assert!(!pass_rule(Some(Outcome::Timeout), Some(&clean)));
        assert!(!pass_rule(Some(Outcome::Finished), None));
        assert!(!pass_rule(None, Some(&clean)));
    }
}
