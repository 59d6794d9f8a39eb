//! Experience retrieval and the delayed audit that feeds telemetry back.
//!
//! Each retrieval first audits the previous one: the steps taken after its
//! anchor are shown to the model, which rules each recommended entry a
//! success, failure or neutral. Then the current situation is embedded,
//! the nearest `n` entries are re-ranked by composite score, and `k` are
//! chosen either directly or by a selector call.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{Llm, Message, Role};
use crate::prompts::{PromptKind, Prompts};
use crate::sandbox::ExecResult;
use crate::store::{RetrievalCandidate, StoreError, TelemetryDelta, XpuStore};
use crate::text;
use crate::trajectory::Step;
use crate::xpu::{TierThresholds, Xpu, XpuId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Selector,
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub mode: RetrievalMode,
    pub n: usize,
    pub k: usize,
    pub thresholds: TierThresholds,
    /// Lines of raw output kept in the situation.
    pub raw_lines: usize,
    /// Cap on the rendered situation, chars.
    pub situation_cap: usize,
    pub audit_window: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Selector,
            n: 10,
            k: 3,
            thresholds: TierThresholds::default(),
            raw_lines: 40,
            situation_cap: 4000,
            audit_window: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("cannot build a situation from an empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("embedding failed: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSituation {
    pub state_summary: String,
    pub raw_output: String,
    pub error_text: String,
}

impl HybridSituation {
    /// Query text, at most `cap` chars; raw output absorbs the truncation.
    pub fn render(&self, cap: usize) -> String {
        let summary = text::truncate_head(&self.state_summary, cap / 4);
        let errors = text::truncate_middle(&self.error_text, cap / 4);
        let mut out = String::new();
        if !summary.is_empty() {
            out.push_str(&format!("Current state: {summary}\n"));
        }
        if !errors.is_empty() {
            out.push_str(&format!("Errors:\n{errors}\n"));
        }
        let header = "Output:\n";
        let used = out.chars().count() + header.len();
        let room = cap.saturating_sub(used);
        if !self.raw_output.is_empty() && room > 0 {
            out.push_str(header);
            out.push_str(&text::truncate_middle(&self.raw_output, room));
        }
        text::truncate_head(&out, cap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalAnchor {
    pub id: u64,
    pub recommended_ids: Vec<XpuId>,
    /// Trajectory length when the retrieval happened.
    pub trajectory_position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Success,
    Failure,
    Neutral,
}

impl AuditOutcome {
    pub fn delta(self) -> TelemetryDelta {
        match self {
            AuditOutcome::Success => TelemetryDelta::new(0, 1, 0),
            AuditOutcome::Failure => TelemetryDelta::new(0, 0, 1),
            AuditOutcome::Neutral => TelemetryDelta::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub xpu_id: XpuId,
    pub outcome: AuditOutcome,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub xpus: Vec<Xpu>,
    pub candidates: Vec<RetrievalCandidate>,
    pub anchor: RetrievalAnchor,
    pub mode_used: RetrievalMode,
    /// Selector ids that were not among the candidates.
    pub dropped_ids: Vec<String>,
}

/// What one failure-triggered call produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRound {
    pub verdicts: Vec<AuditVerdict>,
    pub situation: HybridSituation,
    pub result: RetrievalResult,
}

pub struct Retriever {
    store: Arc<XpuStore>,
    llm: Llm,
    prompts: Arc<Prompts>,
    cfg: RetrieverConfig,
    next_anchor: u64,
    audited: HashSet<u64>,
    pending: Option<RetrievalAnchor>,
    events: Vec<String>,
}

impl Retriever {
    pub fn new(store: Arc<XpuStore>, llm: Llm, prompts: Arc<Prompts>, cfg: RetrieverConfig) -> Self {
        Self {
            store,
            llm,
            prompts,
            cfg,
            next_anchor: 0,
            audited: HashSet::new(),
            pending: None,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.cfg
    }

    /// Notable events (fallbacks, dropped ids, audit failures).
    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn store(&self) -> &Arc<XpuStore> {
        &self.store
    }

    pub fn pending_anchor(&self) -> Option<&RetrievalAnchor> {
        self.pending.as_ref()
    }

    pub fn build_situation(&mut self, steps: &[Step], last: &ExecResult) -> Result<HybridSituation, RetrieverError> {
        if steps.is_empty() {
            return Err(RetrieverError::EmptyTrajectory);
        }
        let output = last.combined_output();
        let raw_output = text::last_lines(&output, self.cfg.raw_lines);
        let mut error_text = text::error_lines(&output).join("\n");
        if error_text.is_empty() && !last.ok() {
            error_text = format!("`{}` exited with code {}", last.command, last.exit_code);
        }
        let tail: Vec<String> = steps
            .iter()
            .rev()
            .take(3)
            .rev()
            .map(|s| s.render(800))
            .collect();
        let msgs = [
            Message::system(self.prompts.raw(PromptKind::RetrieverSummary)),
            Message::user(format!(
                "Recent steps:\n{}\n\nLatest command: {}\nOutput:\n{}",
                tail.join("\n\n"),
                last.command,
                text::truncate_middle(&raw_output, 2000)
            )),
        ];
        let state_summary = match self.llm.chat_text(Role::RetrieverSummary, &msgs) {
            Ok(s) => s.trim().to_string(),
            Err(e) => {
                self.events.push(format!("summary unavailable: {e}"));
                String::new()
            }
        };
        Ok(HybridSituation {
            state_summary,
            raw_output,
            error_text,
        })
    }

    pub fn retrieve(&mut self, situation: &HybridSituation, position: usize) -> Result<RetrievalResult, RetrieverError> {
        let id = self.next_anchor;
        self.next_anchor += 1;
        let empty = |mode| RetrievalResult {
            xpus: Vec::new(),
            candidates: Vec::new(),
            anchor: RetrievalAnchor {
                id,
                recommended_ids: Vec::new(),
                trajectory_position: position,
            },
            mode_used: mode,
            dropped_ids: Vec::new(),
        };
        if self.store.is_empty() {
            return Ok(empty(self.cfg.mode));
        }
        let query = self
            .llm
            .embed(&situation.render(self.cfg.situation_cap))
            .map_err(|e| RetrieverError::Embedding(e.to_string()))?;
        let candidates = self
            .store
            .ranked_candidates(&query, self.cfg.n.max(1), &self.cfg.thresholds)?;

        let mut mode_used = self.cfg.mode;
        let mut dropped_ids = Vec::new();
        let chosen: Vec<XpuId> = match self.cfg.mode {
            RetrievalMode::Direct => candidates.iter().take(self.cfg.k).map(|c| c.xpu_id.clone()).collect(),
            RetrievalMode::Selector => match self.select(situation, &candidates) {
                Ok((ids, dropped)) => {
                    if !dropped.is_empty() {
                        self.events.push(format!("selector returned unknown ids {dropped:?}"));
                    }
                    dropped_ids = dropped;
                    ids
                }
                Err(e) => {
                    self.events.push(format!("selector failed, using direct ranking: {e}"));
                    mode_used = RetrievalMode::Direct;
                    candidates.iter().take(self.cfg.k).map(|c| c.xpu_id.clone()).collect()
                }
            },
        };

        let mut xpus = Vec::new();
        for xid in &chosen {
            self.store.update_telemetry(xid, TelemetryDelta::HIT)?;
            if let Some(e) = self.store.get(xid) {
                xpus.push(e.xpu);
            }
        }
        let mut result = empty(mode_used);
        result.anchor.recommended_ids = chosen;
        result.xpus = xpus;
        result.candidates = candidates;
        result.dropped_ids = dropped_ids;
        Ok(result)
    }

    fn select(
        &mut self,
        situation: &HybridSituation,
        candidates: &[RetrievalCandidate],
    ) -> Result<(Vec<XpuId>, Vec<String>), String> {
        let listing: Vec<Value> = candidates
            .iter()
            .filter_map(|c| {
                let e = self.store.get(&c.xpu_id)?;
                Some(json!({
                    "id": c.xpu_id,
                    "advice_nl": e.xpu.advice_nl,
                    "atoms": e.xpu.atoms,
                    "telemetry": c.telemetry,
                    "similarity": (c.sim * 1000.0).round() / 1000.0,
                }))
            })
            .collect();
        let k = self.cfg.k.to_string();
        let msgs = [
            Message::system(self.prompts.render(PromptKind::RetrieverSelect, &[("k", &k)])),
            Message::user(format!(
                "Situation:\n{}\n\nCandidates:\n{}",
                situation.render(self.cfg.situation_cap),
                serde_json::to_string_pretty(&listing).unwrap_or_default()
            )),
        ];
        let reply = self.llm.chat(Role::RetrieverSelect, &msgs).map_err(|e| e.to_string())?;
        let doc = text::extract_json(&reply)?;
        let ids = doc
            .get("selected_ids")
            .and_then(Value::as_array)
            .ok_or("reply has no `selected_ids` list")?;
        let known: BTreeSet<&str> = candidates.iter().map(|c| c.xpu_id.as_str()).collect();
        let mut chosen = Vec::new();
        let mut dropped = Vec::new();
        for v in ids {
            let s = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if !known.contains(s.as_str()) {
                dropped.push(s);
            } else if !chosen.iter().any(|c: &XpuId| c.as_str() == s) {
                chosen.push(XpuId::new(s));
            }
        }
        chosen.truncate(self.cfg.k);
        Ok((chosen, dropped))
    }

    /// Judges an anchor's recommendations against the steps that followed it
    /// and applies the resulting counter updates. An anchor is audited once;
    /// later calls return an empty list.
    pub fn audit(&mut self, anchor: &RetrievalAnchor, steps: &[Step]) -> Vec<AuditVerdict> {
        if !self.audited.insert(anchor.id) || anchor.recommended_ids.is_empty() {
            return Vec::new();
        }
        let start = anchor.trajectory_position.min(steps.len());
        let window = &steps[start..(start + self.cfg.audit_window).min(steps.len())];
        let neutral = |why: &str| -> Vec<AuditVerdict> {
            anchor
                .recommended_ids
                .iter()
                .map(|id| AuditVerdict {
                    xpu_id: id.clone(),
                    outcome: AuditOutcome::Neutral,
                    rationale: why.to_string(),
                })
                .collect()
        };
        if window.is_empty() {
            return neutral("no steps after the recommendation");
        }
        let entries: Vec<Value> = anchor
            .recommended_ids
            .iter()
            .map(|id| {
                let advice = self.store.get(id).map(|e| e.xpu.advice_nl).unwrap_or_default();
                json!({"xpu_id": id, "advice_nl": advice})
            })
            .collect();
        let rendered: Vec<String> = window.iter().map(|s| s.render(1500)).collect();
        let msgs = [
            Message::system(self.prompts.raw(PromptKind::RetrieverAudit)),
            Message::user(format!(
                "Recommended entries:\n{}\n\nSteps taken afterwards:\n{}",
                serde_json::to_string_pretty(&entries).unwrap_or_default(),
                rendered.join("\n\n")
            )),
        ];
        let parsed = self
            .llm
            .chat(Role::RetrieverAudit, &msgs)
            .map_err(|e| e.to_string())
            .and_then(|r| parse_verdicts(&r));
        let verdicts: Vec<AuditVerdict> = match parsed {
            Ok(found) => anchor
                .recommended_ids
                .iter()
                .map(|id| {
                    found
                        .iter()
                        .find(|v| &v.xpu_id == id)
                        .cloned()
                        .unwrap_or(AuditVerdict {
                            xpu_id: id.clone(),
                            outcome: AuditOutcome::Neutral,
                            rationale: "no verdict given".into(),
                        })
                })
                .collect(),
            Err(e) => {
                self.events.push(format!("audit of anchor {} failed: {e}", anchor.id));
                return neutral("audit unavailable");
            }
        };
        for v in &verdicts {
            if v.outcome == AuditOutcome::Neutral {
                continue;
            }
            if let Err(e) = self.store.update_telemetry(&v.xpu_id, v.outcome.delta()) {
                self.events.push(format!("telemetry update for {} failed: {e}", v.xpu_id));
            }
        }
        verdicts
    }

    /// Audits the pending anchor, if any, without retrieving again. Used when
    /// a run ends so its last recommendations are still judged.
    pub fn flush(&mut self, steps: &[Step]) -> Vec<AuditVerdict> {
        match self.pending.take() {
            Some(anchor) => self.audit(&anchor, steps),
            None => Vec::new(),
        }
    }

    /// Audit the pending anchor, then retrieve for the new failure.
    pub fn on_failure(&mut self, steps: &[Step], last: &ExecResult) -> Result<RetrievalRound, RetrieverError> {
        let verdicts = match self.pending.take() {
            Some(anchor) => self.audit(&anchor, steps),
            None => Vec::new(),
        };
        let situation = self.build_situation(steps, last)?;
        let result = self.retrieve(&situation, steps.len())?;
        self.pending = Some(result.anchor.clone());
        Ok(RetrievalRound {
            verdicts,
            situation,
            result,
        })
    }
}

fn parse_verdicts(reply: &str) -> Result<Vec<AuditVerdict>, String> {
    let doc = text::extract_json(reply)?;
    let list = doc
        .get("verdicts")
        .and_then(Value::as_array)
        .ok_or("reply has no `verdicts` list")?;
    let mut out = Vec::new();
    for v in list {
        let Some(id) = v.get("xpu_id").and_then(Value::as_str) else {
            continue;
        };
        let outcome = match v.get("verdict").and_then(Value::as_str).map(str::to_ascii_lowercase).as_deref() {
            Some("success") => AuditOutcome::Success,
            Some("failure") => AuditOutcome::Failure,
            _ => AuditOutcome::Neutral,
        };
        out.push(AuditVerdict {
            xpu_id: XpuId::new(id),
            outcome,
            rationale: v.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    Ok(out)
}
