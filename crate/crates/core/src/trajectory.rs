//! Setup tasks, agent actions and the recorded trajectory.
//!
//! On disk a trajectory is JSON Lines: a header with the task and budgets,
//! one line per step, and a footer with the outcome and retrieval anchors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::retriever::RetrievalAnchor;
use crate::sandbox::{ErrorProbe, ExecResult, Snapshot, TrialOutcome};
use crate::text;
use crate::verifier::{VerifierOutcome, VerifierReport};

/// One repository to set up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoTask {
    /// Short name used for run directories and provenance.
    pub name: String,
    pub source: String,
    pub revision: String,
    #[serde(default)]
    pub execution_targets: Vec<String>,
    #[serde(default = "default_base_image")]
    pub base_image: String,
    #[serde(default = "default_workdir")]
    pub workdir: String,
}

fn default_base_image() -> String {
    "python:3.11-bookworm".into()
}

fn default_workdir() -> String {
    "/workspace/repo".into()
}

impl RepoTask {
    pub fn new(name: &str, source: &str, revision: &str) -> Self {
        Self {
            name: name.into(),
            source: source.into(),
            revision: revision.into(),
            execution_targets: Vec::new(),
            base_image: default_base_image(),
            workdir: default_workdir(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.revision.trim().is_empty() {
            return Err(format!("task `{}` has no pinned revision", self.name));
        }
        if self.source.trim().is_empty() {
            return Err(format!("task `{}` has no source", self.name));
        }
        Ok(())
    }

    /// The harness command that checks the repository out.
    pub fn clone_command(&self) -> String {
        format!(
            "git clone {} {} && git -C {} checkout {}",
            shell_words::quote(&self.source),
            shell_words::quote(&self.workdir),
            shell_words::quote(&self.workdir),
            shell_words::quote(&self.revision)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub max_steps: usize,
    /// Seconds.
    pub wall_clock: f64,
    /// Per-command timeout, seconds.
    pub command_timeout: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_steps: 60,
            wall_clock: 3600.0,
            command_timeout: 900.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action_type", content = "content", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    ShellCommand {
        command: String,
    },
    TryXpuSuggestion {
        xpu_suggestion_id: String,
        #[serde(default)]
        command: String,
        reasoning: String,
    },
    SetEnv {
        env_key: String,
        env_value: String,
    },
    RollbackEnv {
        n_frames: usize,
    },
    Verify {},
    Finish {
        message: String,
    },
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Action::ShellCommand { .. } => "SHELL_COMMAND",
            Action::TryXpuSuggestion { .. } => "TRY_XPU_SUGGESTION",
            Action::SetEnv { .. } => "SET_ENV",
            Action::RollbackEnv { .. } => "ROLLBACK_ENV",
            Action::Verify {} => "VERIFY",
            Action::Finish { .. } => "FINISH",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed action: {0}")]
pub struct MalformedAction(pub String);

fn required_str(content: &Map<String, Value>, key: &str, kind: &str) -> Result<String, MalformedAction> {
    match content.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) | None | Some(Value::Null) => {
            Err(MalformedAction(format!("{kind} requires a non-empty `{key}`")))
        }
        Some(other) => Err(MalformedAction(format!("{kind}: `{key}` must be a string, got {other}"))),
    }
}

fn optional_str(content: &Map<String, Value>, key: &str) -> String {
    content.get(key).and_then(Value::as_str).unwrap_or_default().to_string()
}

/// Parses a model reply into `(thought, action)`.
pub fn parse_action(reply: &str) -> Result<(String, Action), MalformedAction> {
    let doc = text::extract_json(reply).map_err(MalformedAction)?;
    let obj = doc
        .as_object()
        .ok_or_else(|| MalformedAction("reply is not a JSON object".into()))?;
    let thought = obj.get("thought").and_then(Value::as_str).unwrap_or_default().to_string();
    let kind = obj
        .get("action_type")
        .and_then(Value::as_str)
        .ok_or_else(|| MalformedAction("missing `action_type`".into()))?;
    let empty = Map::new();
    let content = match obj.get("content") {
        None | Some(Value::Null) => &empty,
        Some(Value::Object(m)) => m,
        Some(_) => return Err(MalformedAction("`content` must be an object".into())),
    };
    let action = match kind {
        "SHELL_COMMAND" => Action::ShellCommand {
            command: required_str(content, "command", kind)?,
        },
        "TRY_XPU_SUGGESTION" => Action::TryXpuSuggestion {
            xpu_suggestion_id: required_str(content, "xpu_suggestion_id", kind)?,
            command: optional_str(content, "command"),
            reasoning: required_str(content, "reasoning", kind)?,
        },
        "SET_ENV" => Action::SetEnv {
            env_key: required_str(content, "env_key", kind)?,
            env_value: match content.get("env_value") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                Some(Value::Bool(b)) => b.to_string(),
                _ => return Err(MalformedAction("SET_ENV requires `env_value`".into())),
            },
        },
        "ROLLBACK_ENV" => {
            let n = match content.get("n_frames") {
                None | Some(Value::Null) => 1,
                Some(v) => v
                    .as_u64()
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| MalformedAction("ROLLBACK_ENV `n_frames` must be an integer >= 1".into()))?
                    as usize,
            };
            Action::RollbackEnv { n_frames: n }
        }
        "VERIFY" => Action::Verify {},
        "FINISH" => Action::Finish {
            message: required_str(content, "message", kind)?,
        },
        other => return Err(MalformedAction(format!("unknown action_type `{other}`"))),
    };
    Ok((thought, action))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Exec {
        result: ExecResult,
    },
    Trial {
        xpu_id: String,
        commands: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probe: Option<ErrorProbe>,
        outcome: TrialOutcome,
    },
    Verify {
        report: VerifierReport,
    },
    Rollback {
        restored: Snapshot,
        depth: usize,
    },
    EnvSet {
        key: String,
        value: String,
    },
    Error {
        message: String,
    },
    Rejected {
        message: String,
    },
    Finished {
        message: String,
    },
}

impl Observation {
    /// Text shown to the model, bounded to roughly `max` chars.
    pub fn render(&self, max: usize) -> String {
        match self {
            Observation::Exec { result } => result.excerpt(max),
            Observation::Trial {
                xpu_id,
                commands,
                outcome,
                ..
            } => {
                let mut s = format!(
                    "trial of {xpu_id}: {:?}, stack depth {}\n",
                    outcome.status, outcome.depth
                );
                for (cmd, r) in commands.iter().zip(&outcome.per_command) {
                    s.push_str(&format!("$ {cmd}\n{}\n", r.excerpt(max / 2)));
                }
                if outcome.per_command.len() < commands.len() {
                    s.push_str("(halted at the first failing command; state restored)\n");
                }
                if let Some(p) = &outcome.probe {
                    s.push_str(&format!("probe `{}`:\n{}\n", p.command, p.excerpt(max / 4)));
                }
                text::truncate_middle(&s, max)
            }
            Observation::Verify { report } => {
                text::truncate_middle(&format!("verifier: {}\n{}", report.outcome.as_str(), report.notes), max)
            }
            Observation::Rollback { restored, depth } => format!(
                "rolled back to checkpoint `{}` (taken at step {}); stack depth now {depth}",
                restored.label, restored.created_at_step
            ),
            Observation::EnvSet { key, value } => format!("{key}={value} set"),
            Observation::Error { message } | Observation::Rejected { message } => message.clone(),
            Observation::Finished { message } => format!("finished: {message}"),
        }
    }

    /// The command results this observation carries, in order.
    pub fn exec_results(&self) -> Vec<&ExecResult> {
        match self {
            Observation::Exec { result } => vec![result],
            Observation::Trial { outcome, .. } => outcome.per_command.iter().chain(outcome.probe.as_ref()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub thought: String,
    pub action: Action,
    pub observation: Observation,
    /// Malformed replies that preceded this step's action.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_attempts: Vec<String>,
}

impl Step {
    pub fn render(&self, max: usize) -> String {
        let action = serde_json::to_string(&self.action).unwrap_or_default();
        format!(
            "[step {}] thought: {}\naction: {}\nobservation: {}",
            self.index,
            text::truncate_head(&self.thought, 500),
            text::truncate_head(&action, 1000),
            self.observation.render(max)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Finished,
    BudgetExhausted,
    Timeout,
    Aborted,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Finished => "finished",
            Outcome::BudgetExhausted => "budget_exhausted",
            Outcome::Timeout => "timeout",
            Outcome::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: RepoTask,
    pub budgets: Budgets,
    pub steps: Vec<Step>,
    pub anchors: Vec<RetrievalAnchor>,
    pub outcome: Outcome,
    /// Seconds, virtual time included.
    #[serde(default)]
    pub elapsed: f64,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header { task: RepoTask, budgets: Budgets },
    Step(Step),
    Footer {
        outcome: Outcome,
        anchors: Vec<RetrievalAnchor>,
        #[serde(default)]
        elapsed: f64,
    },
}

impl Trajectory {
    /// Checks the structural invariants: contiguous indices and FINISH last.
    pub fn check(&self) -> Result<(), String> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.index != i {
                return Err(format!("step {i} has index {}", s.index));
            }
        }
        let finishes: Vec<usize> = self
            .steps
            .iter()
            .filter(|s| matches!(s.observation, Observation::Finished { .. }))
            .map(|s| s.index)
            .collect();
        match finishes.as_slice() {
            [] => {}
            [i] if *i + 1 == self.steps.len() => {}
            _ => return Err("an accepted FINISH must be the single last step".into()),
        }
        if self.outcome == Outcome::Finished {
            if finishes.is_empty() {
                return Err("outcome finished without an accepted FINISH".into());
            }
            if !self.has_qualifying_verify() {
                return Err("outcome finished without a qualifying VERIFY".into());
            }
        }
        Ok(())
    }

    pub fn has_qualifying_verify(&self) -> bool {
        self.steps.iter().any(|s| match &s.observation {
            Observation::Verify { report } => report.outcome.permits_finish(),
            _ => false,
        })
    }

    /// Outcome of the latest VERIFY step, if any.
    pub fn last_verify(&self) -> Option<VerifierOutcome> {
        self.steps.iter().rev().find_map(|s| match &s.observation {
            Observation::Verify { report } => Some(report.outcome),
            _ => None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrajectoryError> {
        let io = |source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let mut write = |line: &Line| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")
        };
        write(&Line::Header {
            task: self.task.clone(),
            budgets: self.budgets,
        })
        .map_err(io)?;
        for s in &self.steps {
            write(&Line::Step(s.clone())).map_err(io)?;
        }
        write(&Line::Footer {
            outcome: self.outcome,
            anchors: self.anchors.clone(),
            elapsed: self.elapsed,
        })
        .map_err(io)?;
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrajectoryError> {
        let io = |source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut header = None;
        let mut steps = Vec::new();
        let mut footer = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| TrajectoryError::Corrupt { line: i + 1, reason };
            match serde_json::from_str::<Line>(&line).map_err(|e| corrupt(e.to_string()))? {
                Line::Header { task, budgets } => header = Some((task, budgets)),
                Line::Step(s) => steps.push(s),
                Line::Footer {
                    outcome,
                    anchors,
                    elapsed,
                } => footer = Some((outcome, anchors, elapsed)),
            }
        }
        let (task, budgets) = header.ok_or(TrajectoryError::Corrupt {
            line: 1,
            reason: "missing header".into(),
        })?;
        // a trajectory cut short (no footer) reads as aborted
        let (outcome, anchors, elapsed) = footer.unwrap_or((Outcome::Aborted, Vec::new(), 0.0));
        Ok(Trajectory {
            task,
            budgets,
            steps,
            anchors,
            outcome,
            elapsed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_schema() {
        let (thought, a) = parse_action(
            r#"{"thought":"need numpy","action_type":"SHELL_COMMAND","content":{"command":"pip install numpy"}}"#,
        )
        .unwrap();
        assert_eq!(thought, "need numpy");
        assert_eq!(
            a,
            Action::ShellCommand {
                command: "pip install numpy".into()
            }
        );
        let (_, a) = parse_action(
            "```json\n{\"thought\":\"\",\"action_type\":\"TRY_XPU_SUGGESTION\",\"content\":{\"xpu_suggestion_id\":\"xpu_000001\",\"reasoning\":\"matches\"}}\n```",
        )
        .unwrap();
        assert_eq!(
            a,
            Action::TryXpuSuggestion {
                xpu_suggestion_id: "xpu_000001".into(),
                command: String::new(),
                reasoning: "matches".into()
            }
        );
        let (_, a) = parse_action(r#"{"action_type":"ROLLBACK_ENV","content":{}}"#).unwrap();
        assert_eq!(a, Action::RollbackEnv { n_frames: 1 });
        let (_, a) = parse_action(r#"{"action_type":"VERIFY"}"#).unwrap();
        assert_eq!(a, Action::Verify {});
    }

    #[test]
    fn rejects_bad_actions() {
        for bad in [
            r#"{"action_type":"FINISH","content":{}}"#,
            r#"{"action_type":"REBOOT","content":{}}"#,
            r#"{"action_type":"SHELL_COMMAND","content":{"command":""}}"#,
            r#"{"action_type":"ROLLBACK_ENV","content":{"n_frames":0}}"#,
            r#"{"action_type":"SET_ENV","content":{"env_key":"A"}}"#,
            r#"{"action_type":"TRY_XPU_SUGGESTION","content":{"xpu_suggestion_id":"x"}}"#,
            r#"{"thought":"no action"}"#,
            "not json at all",
        ] {
            assert!(parse_action(bad).is_err(), "{bad}");
        }
        let e = parse_action(r#"{"action_type":"REBOOT"}"#).unwrap_err();
        assert!(e.0.contains("unknown action_type"));
    }

    #[test]
    fn action_serialization_matches_reply_schema() {
        let a = Action::SetEnv {
            env_key: "A".into(),
            env_value: "1".into(),
        };
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["action_type"], "SET_ENV");
        assert_eq!(v["content"]["env_key"], "A");
        let (_, back) = parse_action(&v.to_string()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn clone_command_pins_revision() {
        let t = RepoTask::new("demo", "https://example.com/demo.git", "abc123");
        assert_eq!(
            t.clone_command(),
            "git clone https://example.com/demo.git /workspace/repo && git -C /workspace/repo checkout abc123"
        );
        assert!(RepoTask::new("x", "y", "").validate().is_err());
    }
}
