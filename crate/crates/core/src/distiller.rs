//! Offline distillation of finished runs into experience entries.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adjudication::Adjudication;
use crate::gateway::{Llm, Message, Role};
use crate::prompts::{PromptKind, Prompts};
use crate::store::{XpuStore, DUPLICATE_THRESHOLD};
use crate::text;
use crate::trajectory::Trajectory;
use crate::xpu::{merge_xpus, AtomKind, Telemetry, Xpu, XpuId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRef {
    pub step: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixRef {
    pub step: usize,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFixPair {
    pub problem: ProblemRef,
    pub fix: FixRef,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestKind {
    IngestedNew,
    MergedInto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAction {
    pub action: IngestKind,
    pub xpu_id: XpuId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub pairs: Vec<ProblemFixPair>,
    pub candidates: Vec<Xpu>,
    pub actions: Vec<IngestAction>,
    pub notes: Vec<String>,
}

impl DistillReport {
    pub fn count(&self, kind: IngestKind) -> usize {
        self.actions.iter().filter(|a| a.action == kind).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillerConfig {
    pub duplicate_threshold: f64,
    /// Per-step cap when the trajectory is shown to the model.
    pub step_chars: usize,
}

impl Default for DistillerConfig {
    fn default() -> Self {
        Self {
            duplicate_threshold: DUPLICATE_THRESHOLD,
            step_chars: 1500,
        }
    }
}

/// Text embedded for a candidate: its triggers plus the first advice sentence.
pub fn embedding_text(xpu: &Xpu) -> String {
    let first = xpu
        .advice_nl
        .iter()
        .find(|a| !a.trim().is_empty())
        .map(|a| first_sentence(a))
        .unwrap_or_default();
    let mut parts = xpu.signals.situation_triggers.clone();
    parts.push(first);
    parts.join("\n")
}

fn first_sentence(s: &str) -> String {
    let s = s.trim();
    match s.find(". ") {
        Some(i) => s[..=i].to_string(),
        None => s.to_string(),
    }
}

fn atom_kinds_listing() -> String {
    AtomKind::ALL
        .iter()
        .map(|k| format!("{}({})", k.as_str(), k.required_args().join(", ")))
        .collect::<Vec<_>>()
        .join("; ")
}

pub struct Distiller<'a> {
    llm: &'a Llm,
    prompts: &'a Prompts,
    cfg: DistillerConfig,
    notes: Vec<String>,
}

impl<'a> Distiller<'a> {
    pub fn new(llm: &'a Llm, prompts: &'a Prompts, cfg: DistillerConfig) -> Self {
        Self {
            llm,
            prompts,
            cfg,
            notes: Vec::new(),
        }
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    fn ask(&mut self, system: String, user: String) -> Option<Value> {
        let messages = [Message::system(system), Message::user(user)];
        let reply = match self.llm.chat(Role::Distiller, &messages) {
            Ok(r) => r,
            Err(e) => {
                self.notes.push(format!("distiller model unavailable: {e}"));
                return None;
            }
        };
        match text::extract_json(&reply) {
            Ok(v) => Some(v),
            Err(e) => {
                self.notes.push(format!("unreadable distiller reply: {e}"));
                None
            }
        }
    }

    /// Problem and fix pairs, with the adjudication read first when present.
    pub fn ingest_trajectory(&mut self, trajectory: &Trajectory, adjudication: Option<&Adjudication>) -> Vec<ProblemFixPair> {
        if trajectory.steps.is_empty() {
            return Vec::new();
        }
        let phase2 = match adjudication {
            Some(a) => json!({
                "verdict": a.decision,
                "prosecution_charges": a.charges,
                "rulings": a.rulings,
            })
            .to_string(),
            None => "(no adjudication for this run)".to_string(),
        };
        let steps: Vec<String> = trajectory.steps.iter().map(|s| s.render(self.cfg.step_chars)).collect();
        let user = format!(
            "phase2_context:\n{phase2}\n\nRepository: {}\nOutcome: {}\n\nTrajectory:\n{}",
            trajectory.task.source,
            trajectory.outcome.as_str(),
            steps.join("\n\n")
        );
        let Some(doc) = self.ask(self.prompts.raw(PromptKind::DistillerExtract).to_string(), user) else {
            return Vec::new();
        };
        let raw = doc.get("pairs").and_then(Value::as_array).cloned().unwrap_or_default();
        let last = trajectory.steps.last().map(|s| s.index).unwrap_or(0);
        let mut pairs = Vec::new();
        for (i, p) in raw.into_iter().enumerate() {
            let pair = match serde_json::from_value::<ProblemFixPair>(p) {
                Ok(mut pair) => {
                    pair.confidence = if pair.confidence.is_finite() { pair.confidence.clamp(0.0, 1.0) } else { 0.0 };
                    pair
                }
                Err(e) => {
                    self.notes.push(format!("pair {i} dropped: {e}"));
                    continue;
                }
            };
            if pair.fix.step < pair.problem.step {
                self.notes.push(format!(
                    "pair {i} dropped: fix at step {} precedes problem at step {}",
                    pair.fix.step, pair.problem.step
                ));
                continue;
            }
            if pair.fix.step > last {
                self.notes.push(format!("pair {i} dropped: step {} is beyond the trajectory", pair.fix.step));
                continue;
            }
            pairs.push(pair);
        }
        pairs
    }

    /// Schema-level candidates; `provenance` is recorded on each.
    pub fn distill(&mut self, pairs: &[ProblemFixPair], provenance: &str) -> Vec<Xpu> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let system = self
            .prompts
            .render(PromptKind::DistillerSchema, &[("atom_kinds", &atom_kinds_listing())]);
        let user = format!(
            "Problem and fix pairs:\n{}",
            serde_json::to_string_pretty(pairs).unwrap_or_default()
        );
        let Some(doc) = self.ask(system, user) else {
            return Vec::new();
        };
        let raw = doc.get("xpus").and_then(Value::as_array).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for (i, v) in raw.into_iter().enumerate() {
            match candidate_from_value(v, provenance) {
                Ok(x) => out.push(x),
                Err(e) => self.notes.push(format!("candidate {i} rejected: {e}")),
            }
        }
        out
    }

    /// Embeds, checks near neighbours, merges confirmed duplicates and
    /// ingests the rest.
    pub fn dedup_and_ingest(&mut self, candidates: &[Xpu], store: &XpuStore) -> Vec<IngestAction> {
        let mut actions = Vec::new();
        for cand in candidates {
            let emb = match self.llm.embed(&embedding_text(cand)) {
                Ok(e) => e,
                Err(e) => {
                    self.notes.push(format!("candidate skipped, embedding failed: {e}"));
                    continue;
                }
            };
            let hits = match store.find_duplicates(&emb, self.cfg.duplicate_threshold) {
                Ok(h) => h,
                Err(e) => {
                    self.notes.push(format!("candidate skipped: {e}"));
                    continue;
                }
            };
            if let Some((top, sim)) = hits.first() {
                if let Some(existing) = store.get(top) {
                    if let Some(fused) = self.judge_duplicate(&existing.xpu, cand, *sim) {
                        let fused = if fused.iter().all(|a| a.trim().is_empty()) {
                            crate::xpu::union_list(&existing.xpu.advice_nl, &cand.advice_nl)
                        } else {
                            fused
                        };
                        match merge_xpus(&existing.xpu, cand, fused).map_err(|e| e.to_string()).and_then(|m| {
                            store.replace_xpu(m).map_err(|e| e.to_string())
                        }) {
                            Ok(()) => {
                                actions.push(IngestAction {
                                    action: IngestKind::MergedInto,
                                    xpu_id: top.clone(),
                                });
                                continue;
                            }
                            Err(e) => self.notes.push(format!("merge into {top} failed, ingesting as new: {e}")),
                        }
                    }
                }
            }
            let mut fresh = cand.clone();
            fresh.id = XpuId::default();
            fresh.telemetry = Telemetry::ZERO;
            match store.ingest(fresh, emb) {
                Ok(id) => actions.push(IngestAction {
                    action: IngestKind::IngestedNew,
                    xpu_id: id,
                }),
                Err(e) => self.notes.push(format!("ingest failed: {e}")),
            }
        }
        actions
    }

    /// Fused advice when the model confirms a duplicate.
    fn judge_duplicate(&mut self, existing: &Xpu, cand: &Xpu, sim: f64) -> Option<Vec<String>> {
        let user = format!(
            "Cosine similarity: {sim:.3}\n\nStored entry:\n{}\n\nNew entry:\n{}",
            serde_json::to_string_pretty(existing).unwrap_or_default(),
            serde_json::to_string_pretty(cand).unwrap_or_default()
        );
        let doc = self.ask(self.prompts.raw(PromptKind::DistillerDedup).to_string(), user)?;
        if doc.get("duplicate").and_then(Value::as_bool) != Some(true) {
            return None;
        }
        Some(
            doc.get("fused_advice")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_str).map(String::from).collect())
                .unwrap_or_default(),
        )
    }

    /// The whole pipeline for one run.
    pub fn run(&mut self, trajectory: &Trajectory, adjudication: Option<&Adjudication>, store: &XpuStore) -> DistillReport {
        let start = self.notes.len();
        let pairs = self.ingest_trajectory(trajectory, adjudication);
        let candidates = self.distill(&pairs, &trajectory.task.name);
        let actions = self.dedup_and_ingest(&candidates, store);
        DistillReport {
            pairs,
            candidates,
            actions,
            notes: self.notes[start..].to_vec(),
        }
    }
}

fn candidate_from_value(mut v: Value, provenance: &str) -> Result<Xpu, String> {
    if let Some(obj) = v.as_object_mut() {
        obj.remove("id");
        obj.remove("telemetry");
    }
    let mut x: Xpu = serde_json::from_value(v).map_err(|e| format!("schema violation: {e}"))?;
    x.telemetry = Telemetry::ZERO;
    if !provenance.is_empty() && !x.provenance.iter().any(|p| p == provenance) {
        x.provenance.push(provenance.to_string());
    }
    x.validate().map_err(|e| format!("schema violation: {e}"))?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FixtureEmbedder, Gateway, ScriptedChat};
    use crate::trajectory::{Action, Budgets, Observation, Outcome, RepoTask, Step};
    use std::sync::Arc;

    fn traj(n: usize) -> Trajectory {
        Trajectory {
            task: RepoTask::new("demo", "https://example.com/demo.git", "abc"),
            budgets: Budgets::default(),
            steps: (0..n)
                .map(|i| Step {
                    index: i,
                    thought: String::new(),
                    action: Action::ShellCommand { command: format!("cmd{i}") },
                    observation: Observation::EnvSet {
                        key: "A".into(),
                        value: "1".into(),
                    },
                    rejected_attempts: Vec::new(),
                })
                .collect(),
            anchors: Vec::new(),
            outcome: Outcome::Finished,
            elapsed: 0.0,
        }
    }

    fn llm(chat: ScriptedChat) -> Llm {
        let emb = FixtureEmbedder::new(3).with_fallback(0);
        Llm::new(Arc::new(Gateway::new(Arc::new(chat), Arc::new(emb))), "d")
    }

    #[test]
    fn forward_attribution_only() {
        let chat = ScriptedChat::new();
        chat.push_json(
            Role::Distiller,
            &json!({"pairs": [
                {"problem": {"step": 3, "error": "e"}, "fix": {"step": 7, "action": "a"}, "confidence": 0.9},
                {"problem": {"step": 5, "error": "e"}, "fix": {"step": 2, "action": "a"}, "confidence": 0.9},
                {"problem": {"step": 1, "error": "e"}, "fix": {"step": 40, "action": "a"}, "confidence": 2.0}
            ]}),
        );
        let llm = llm(chat);
        let prompts = Prompts::default();
        let mut d = Distiller::new(&llm, &prompts, DistillerConfig::default());
        let pairs = d.ingest_trajectory(&traj(10), None);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].problem.step, pairs[0].fix.step), (3, 7));
        assert_eq!(d.notes().len(), 2);
        assert!(d.ingest_trajectory(&traj(0), None).is_empty());
    }

    #[test]
    fn candidates_validated_and_stripped() {
        let chat = ScriptedChat::new();
        chat.push_json(
            Role::Distiller,
            &json!({"xpus": [
                {"id": "x", "signals": {"keywords": ["poetry.lock"]}, "advice_nl": ["Regenerate the lock file."],
                 "atoms": [{"name": "shell", "args": {"cmd": "poetry lock --no-update && poetry install"}}],
                 "telemetry": {"hits": 9, "successes": 9, "failures": 0}},
                {"signals": {"keywords": ["k"]}, "advice_nl": []},
                {"signals": {"regex": ["(?=x)"]}, "advice_nl": ["a"]}
            ]}),
        );
        let llm = llm(chat);
        let prompts = Prompts::default();
        let mut d = Distiller::new(&llm, &prompts, DistillerConfig::default());
        let pair = ProblemFixPair {
            problem: ProblemRef { step: 1, error: "e".into() },
            fix: FixRef { step: 2, action: "a".into() },
            confidence: 1.0,
        };
        let c = d.distill(&[pair], "demo");
        assert_eq!(c.len(), 1);
        assert!(c[0].id.is_empty());
        assert_eq!(c[0].telemetry, Telemetry::ZERO);
        assert_eq!(c[0].provenance, vec!["demo".to_string()]);
        assert_eq!(d.notes().len(), 2);
    }

    #[test]
    fn embedding_text_uses_triggers_and_first_sentence() {
        let mut x = crate::xpu::fixtures::poetry_lock_conflict();
        x.signals.situation_triggers = vec!["t1".into(), "t2".into()];
        x.advice_nl = vec!["First one. Second one.".into(), "other".into()];
        assert_eq!(embedding_text(&x), "t1\nt2\nFirst one.");
    }
}
