//! Post-hoc prosecutor and judge.
//!
//! The prosecutor investigates a finished environment and files charges; the
//! judge checks every charge with one or two commands of its own and rules.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{Llm, Message, Role};
use crate::prompts::{PromptKind, Prompts};
use crate::sandbox::{ExecResult, Sandbox};
use crate::text;
use crate::trajectory::{Action, Observation, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureCategory {
    /// Dependency or runtime version incompatibility.
    C1,
    /// Native or build toolchain gap.
    C2,
    /// Invalid or incomplete package installation.
    C3,
    /// Verification strategy mismatch.
    C4,
    #[serde(rename = "other")]
    Other,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 5] = [
        FailureCategory::C1,
        FailureCategory::C2,
        FailureCategory::C3,
        FailureCategory::C4,
        FailureCategory::Other,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C1" => Some(Self::C1),
            "C2" => Some(Self::C2),
            "C3" => Some(Self::C3),
            "C4" => Some(Self::C4),
            "OTHER" => Some(Self::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::C1 => "C1",
            Self::C2 => "C2",
            Self::C3 => "C3",
            Self::C4 => "C4",
            Self::Other => "other",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::C1 => "dependency / runtime version incompatibility",
            Self::C2 => "native / build toolchain gaps",
            Self::C3 => "invalid or incomplete package installation",
            Self::C4 => "verification strategy mismatch",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One command and what it printed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exhibit {
    pub command: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charge {
    pub id: String,
    pub description: String,
    pub category: FailureCategory,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub secondary: Vec<FailureCategory>,
    pub evidence: Vec<Exhibit>,
}

impl Charge {
    pub fn categories(&self) -> Vec<FailureCategory> {
        let mut out = vec![self.category];
        for c in &self.secondary {
            if !out.contains(c) {
                out.push(*c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ruling {
    Upheld,
    Dismissed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DismissalReason {
    Contradicted,
    OptionalDependency,
    ExternalFactor,
}

impl DismissalReason {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "contradicted" => Some(Self::Contradicted),
            "optional_dependency" => Some(Self::OptionalDependency),
            "external_factor" => Some(Self::ExternalFactor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeRuling {
    pub charge_id: String,
    pub ruling: Ruling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dismissal_reason: Option<DismissalReason>,
    pub verification_commands: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<Exhibit>,
    #[serde(default)]
    pub rationale: String,
}

impl ChargeRuling {
    pub fn is_valid(&self) -> bool {
        (1..=2).contains(&self.verification_commands.len())
            && (self.ruling == Ruling::Upheld || self.dismissal_reason.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Guilty,
    NotGuilty,
}

impl Decision {
    pub fn from_rulings(rulings: &[ChargeRuling]) -> Self {
        if rulings.iter().any(|r| r.ruling == Ruling::Upheld) {
            Decision::Guilty
        } else {
            Decision::NotGuilty
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub rulings: Vec<ChargeRuling>,
}

impl Verdict {
    pub fn new(rulings: Vec<ChargeRuling>) -> Self {
        Self {
            decision: Decision::from_rulings(&rulings),
            rulings,
        }
    }
}

/// The per-run record written beside the trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjudication {
    pub charges: Vec<Charge>,
    pub rulings: Vec<ChargeRuling>,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Adjudication {
    pub fn new(charges: Vec<Charge>, verdict: Verdict, notes: Vec<String>) -> Self {
        Self {
            charges,
            rulings: verdict.rulings,
            decision: verdict.decision,
            notes,
        }
    }

    /// Categories of upheld charges, primary and secondary, without repeats.
    pub fn upheld_categories(&self) -> Vec<FailureCategory> {
        let mut out: Vec<FailureCategory> = Vec::new();
        for r in self.rulings.iter().filter(|r| r.ruling == Ruling::Upheld) {
            if let Some(c) = self.charges.iter().find(|c| c.id == r.charge_id) {
                for cat in c.categories() {
                    if !out.contains(&cat) {
                        out.push(cat);
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdjudicationConfig {
    pub prosecutor_budget: usize,
    /// Extra judge replies on top of two per charge.
    pub judge_slack: usize,
    pub readme_samples: usize,
    /// Seconds.
    pub command_timeout: f64,
    pub workdir: String,
    pub output_chars: usize,
}

impl Default for AdjudicationConfig {
    fn default() -> Self {
        Self {
            prosecutor_budget: 20,
            judge_slack: 4,
            readme_samples: 3,
            command_timeout: 900.0,
            workdir: "/workspace/repo".into(),
            output_chars: 2000,
        }
    }
}

pub const INCOMPLETE_INVESTIGATION: &str = "investigation incomplete";

const README_NAMES: [&str; 4] = ["README.md", "README.rst", "README.txt", "README"];

/// Shell lines found in fenced code blocks or `$ ` prompts of a README.
pub fn readme_commands(readme: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut in_fence = false;
    let mut fence_is_shell = false;
    for line in readme.lines() {
        let t = line.trim();
        if let Some(info) = t.strip_prefix("```").or_else(|| t.strip_prefix("~~~")) {
            if in_fence {
                in_fence = false;
            } else {
                in_fence = true;
                let lang = info.trim().to_ascii_lowercase();
                fence_is_shell = matches!(lang.as_str(), "" | "sh" | "bash" | "shell" | "console" | "shell-session" | "zsh");
            }
            continue;
        }
        let candidate = if in_fence {
            if !fence_is_shell {
                continue;
            }
            t.strip_prefix("$ ").unwrap_or(t)
        } else if let Some(c) = t.strip_prefix("$ ") {
            c
        } else {
            continue;
        };
        let c = candidate.trim();
        if c.is_empty() || c.starts_with('#') || c.starts_with(">>>") || out.iter().any(|o| o == c) {
            continue;
        }
        out.push(c.to_string());
    }
    out
}

/// Compact one-line-per-step digest of a trajectory.
pub fn trajectory_digest(t: &Trajectory, max: usize) -> String {
    let mut lines = Vec::new();
    for s in &t.steps {
        let what = match &s.action {
            Action::ShellCommand { command } => command.clone(),
            Action::TryXpuSuggestion { xpu_suggestion_id, .. } => format!("try {xpu_suggestion_id}"),
            Action::SetEnv { env_key, env_value } => format!("{env_key}={env_value}"),
            Action::RollbackEnv { n_frames } => format!("rollback {n_frames}"),
            Action::Verify {} => "verify".into(),
            Action::Finish { message } => message.clone(),
        };
        let result = match &s.observation {
            Observation::Verify { report } => report.outcome.as_str().to_string(),
            Observation::Trial { outcome, .. } => format!("{:?}", outcome.status).to_lowercase(),
            Observation::Rejected { message } | Observation::Error { message } => message.clone(),
            o => match o.exec_results().last() {
                Some(r) => format!("exit {}", r.exit_code),
                None => "ok".into(),
            },
        };
        lines.push(format!(
            "{:>3} {} {} -> {}",
            s.index,
            s.action.kind(),
            text::truncate_middle(&what, 160),
            text::truncate_middle(&result, 120)
        ));
    }
    lines.push(format!("outcome: {}", t.outcome.as_str()));
    text::truncate_middle(&lines.join("\n"), max)
}

pub struct Prosecutor<'a> {
    llm: &'a Llm,
    prompts: &'a Prompts,
    cfg: AdjudicationConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prosecution {
    pub charges: Vec<Charge>,
    /// Commands the prosecutor ran, in order.
    pub record: Vec<Exhibit>,
    pub notes: Vec<String>,
}

struct Session<'s> {
    sandbox: &'s mut Sandbox,
    timeout: Duration,
    output_chars: usize,
    record: Vec<(Exhibit, i32)>,
}

impl Session<'_> {
    fn run(&mut self, command: &str) -> (String, i32) {
        match self.sandbox.exec(command, self.timeout) {
            Ok(r) => self.keep(command, &r),
            Err(e) => {
                let msg = format!("execution error: {e}");
                self.record.push((
                    Exhibit {
                        command: command.into(),
                        output: msg.clone(),
                    },
                    -1,
                ));
                (msg, -1)
            }
        }
    }

    fn keep(&mut self, command: &str, r: &ExecResult) -> (String, i32) {
        let output = format!("exit {}\n{}", r.exit_code, r.excerpt(self.output_chars));
        self.record.push((
            Exhibit {
                command: command.into(),
                output: output.clone(),
            },
            r.exit_code,
        ));
        (output, r.exit_code)
    }

    fn captured(&self, command: &str) -> Option<&Exhibit> {
        self.record.iter().rev().map(|(e, _)| e).find(|e| e.command.trim() == command.trim())
    }
}

type ParsedCharge = (String, FailureCategory, Vec<FailureCategory>, Vec<Exhibit>);

fn parse_charges(doc: &Value) -> Result<Vec<ParsedCharge>, String> {
    let list = doc.get("charges").and_then(Value::as_array).ok_or("missing `charges` list")?;
    let mut out = Vec::new();
    for (i, c) in list.iter().enumerate() {
        let description = text::str_field(c, "description")
            .filter(|d| !d.trim().is_empty())
            .ok_or(format!("charge {i} has no description"))?
            .to_string();
        let category = text::str_field(c, "category")
            .and_then(FailureCategory::parse)
            .unwrap_or(FailureCategory::Other);
        let secondary = c
            .get("secondary")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).filter_map(FailureCategory::parse).filter(|s| *s != category).collect())
            .unwrap_or_default();
        let evidence = c
            .get("evidence")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .map(|e| match e {
                        Value::String(s) => Exhibit {
                            command: String::new(),
                            output: s.clone(),
                        },
                        _ => Exhibit {
                            command: text::str_field(e, "command").unwrap_or_default().to_string(),
                            output: text::str_field(e, "output").unwrap_or_default().to_string(),
                        },
                    })
                    .filter(|e| !e.command.is_empty() || !e.output.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        out.push((description, category, secondary, evidence));
    }
    Ok(out)
}

impl<'a> Prosecutor<'a> {
    pub fn new(llm: &'a Llm, prompts: &'a Prompts, cfg: AdjudicationConfig) -> Self {
        Self { llm, prompts, cfg }
    }

    fn readme_listing(&self, session: &mut Session) -> Vec<String> {
        for name in README_NAMES {
            let path = format!("{}/{name}", self.cfg.workdir.trim_end_matches('/'));
            if let Ok(r) = session.sandbox.exec(&format!("cat {}", shell_words::quote(&path)), session.timeout) {
                if r.ok() {
                    return readme_commands(&r.stdout);
                }
            }
        }
        Vec::new()
    }

    /// Runs the six-step investigation against `sandbox`.
    pub fn prosecute(&self, sandbox: &mut Sandbox, trajectory: &Trajectory) -> Prosecution {
        let mut session = Session {
            sandbox,
            timeout: Duration::from_secs_f64(self.cfg.command_timeout),
            output_chars: self.cfg.output_chars,
            record: Vec::new(),
        };
        let mut notes = Vec::new();
        let mut messages = vec![
            Message::system(self.prompts.raw(PromptKind::Prosecutor)),
            Message::user(format!(
                "Repository: {} at {}\nRepository root: {}\nTest targets: {}\n\nSetup trajectory:\n{}\n\nStart with step 0.",
                trajectory.task.source,
                trajectory.task.revision,
                self.cfg.workdir,
                if trajectory.task.execution_targets.is_empty() {
                    "(none given)".to_string()
                } else {
                    trajectory.task.execution_targets.join("; ")
                },
                trajectory_digest(trajectory, 6000)
            )),
        ];
        let mut step = 0u64;
        let mut readme: Option<Vec<String>> = None;

        for _ in 0..self.cfg.prosecutor_budget {
            let reply = match self.llm.chat(Role::Prosecutor, &messages) {
                Ok(r) => r,
                Err(e) => {
                    notes.push(format!("prosecutor model unavailable: {e}"));
                    break;
                }
            };
            messages.push(Message::assistant(reply.clone()));
            let doc = match text::extract_json(&reply) {
                Ok(d) => d,
                Err(e) => {
                    messages.push(Message::user(format!("could not read your reply ({e}); answer with JSON")));
                    continue;
                }
            };
            let claimed = doc.get("step").and_then(Value::as_u64).unwrap_or(step);
            let observation = if claimed < step {
                format!("step {claimed} is done; continue with step {step} or {}", step + 1)
            } else if claimed > step + 1 {
                format!("steps cannot be skipped; you are on step {step}, the next one is {}", step + 1)
            } else if claimed == 5 {
                match parse_charges(&doc) {
                    Ok(raw) => return self.file(raw, session, notes),
                    Err(e) => {
                        step = 5;
                        format!("could not read the charges ({e}); reply again with the step 5 format")
                    }
                }
            } else {
                step = claimed;
                if step == 3 && readme.is_none() {
                    let found = self.readme_listing(&mut session);
                    let listing = if found.is_empty() {
                        "The README documents no shell commands.".to_string()
                    } else {
                        let lines: Vec<String> = found.iter().take(20).enumerate().map(|(i, c)| format!("[{i}] {c}")).collect();
                        format!(
                            "README commands (pick up to {} with readme_picks):\n{}",
                            self.cfg.readme_samples,
                            lines.join("\n")
                        )
                    };
                    readme = Some(found);
                    if doc.get("readme_picks").is_none() && doc.get("command").is_none() {
                        messages.push(Message::user(listing));
                        continue;
                    }
                }
                let mut commands: Vec<String> = Vec::new();
                if let (Some(picks), Some(found)) = (doc.get("readme_picks").and_then(Value::as_array), readme.as_ref()) {
                    for p in picks.iter().filter_map(Value::as_u64).take(self.cfg.readme_samples) {
                        if let Some(c) = found.get(p as usize) {
                            commands.push(c.clone());
                        }
                    }
                }
                if let Some(c) = text::str_field(&doc, "command").filter(|c| !c.trim().is_empty()) {
                    commands.push(c.to_string());
                }
                if commands.is_empty() {
                    format!("noted. You are on step {step}")
                } else {
                    let outs: Vec<String> = commands
                        .iter()
                        .map(|c| {
                            let (out, _) = session.run(c);
                            format!("$ {c}\n{out}")
                        })
                        .collect();
                    outs.join("\n\n")
                }
            };
            messages.push(Message::user(observation));
        }

        notes.push(format!(
            "prosecutor did not file charges within {} replies (reached step {step})",
            self.cfg.prosecutor_budget
        ));
        let evidence = match session.record.last() {
            Some((e, _)) => vec![e.clone()],
            None => vec![Exhibit {
                command: "(none)".into(),
                output: format!("no command completed; investigation stopped at step {step}"),
            }],
        };
        Prosecution {
            charges: vec![Charge {
                id: "charge-1".into(),
                description: INCOMPLETE_INVESTIGATION.into(),
                category: FailureCategory::Other,
                secondary: Vec::new(),
                evidence,
            }],
            record: session.record.into_iter().map(|(e, _)| e).collect(),
            notes,
        }
    }

    fn file(
        &self,
        raw: Vec<(String, FailureCategory, Vec<FailureCategory>, Vec<Exhibit>)>,
        session: Session,
        mut notes: Vec<String>,
    ) -> Prosecution {
        let mut charges = Vec::new();
        for (description, category, secondary, claimed) in raw {
            // outputs are replaced by what the container actually printed
            let mut evidence: Vec<Exhibit> = claimed
                .into_iter()
                .map(|e| match session.captured(&e.command) {
                    Some(real) => real.clone(),
                    None => e,
                })
                .collect();
            if evidence.is_empty() {
                if let Some((e, _)) = session.record.iter().rev().find(|(_, code)| *code != 0) {
                    evidence.push(e.clone());
                    notes.push(format!("charge `{description}` had no evidence; attached the last failing command"));
                } else {
                    notes.push(format!("charge `{description}` dropped: no evidence"));
                    continue;
                }
            }
            charges.push(Charge {
                id: format!("charge-{}", charges.len() + 1),
                description,
                category,
                secondary,
                evidence,
            });
        }
        Prosecution {
            charges,
            record: session.record.into_iter().map(|(e, _)| e).collect(),
            notes,
        }
    }
}

pub struct Judge<'a> {
    llm: &'a Llm,
    prompts: &'a Prompts,
    cfg: AdjudicationConfig,
}

impl<'a> Judge<'a> {
    pub fn new(llm: &'a Llm, prompts: &'a Prompts, cfg: AdjudicationConfig) -> Self {
        Self { llm, prompts, cfg }
    }

    pub fn budget(&self, charges: usize) -> usize {
        2 * charges + self.cfg.judge_slack
    }

    /// `sandbox` should be a session separate from the prosecutor's.
    pub fn judge(&self, charges: &[Charge], sandbox: &mut Sandbox) -> (Verdict, Vec<String>) {
        let mut notes = Vec::new();
        let mut left = self.budget(charges.len());
        let mut session = Session {
            sandbox,
            timeout: Duration::from_secs_f64(self.cfg.command_timeout),
            output_chars: self.cfg.output_chars,
            record: Vec::new(),
        };
        let mut rulings = Vec::new();
        for charge in charges {
            let ruling = self.rule(charge, &mut session, &mut left, &mut notes);
            rulings.push(ruling);
        }
        (Verdict::new(rulings), notes)
    }

    fn ask(&self, messages: &[Message], left: &mut usize, notes: &mut Vec<String>) -> Option<Value> {
        if *left == 0 {
            return None;
        }
        *left -= 1;
        match self.llm.chat(Role::Judge, messages) {
            Ok(r) => match text::extract_json(&r) {
                Ok(d) => Some(d),
                Err(e) => {
                    notes.push(format!("unreadable judge reply: {e}"));
                    Some(Value::Null)
                }
            },
            Err(e) => {
                notes.push(format!("judge model unavailable: {e}"));
                *left = 0;
                None
            }
        }
    }

    fn rule(&self, charge: &Charge, session: &mut Session, left: &mut usize, notes: &mut Vec<String>) -> ChargeRuling {
        let mut messages = vec![
            Message::system(self.prompts.raw(PromptKind::Judge)),
            Message::user(format!(
                "Charge {} [{}]: {}\nEvidence:\n{}\n\nReply with the commands you will run.",
                charge.id,
                charge.category,
                charge.description,
                serde_json::to_string_pretty(&charge.evidence).unwrap_or_default()
            )),
        ];

        let mut commands: Vec<String> = Vec::new();
        while commands.is_empty() {
            match self.ask(&messages, left, notes) {
                None => break,
                Some(doc) => {
                    commands = doc
                        .get("commands")
                        .and_then(Value::as_array)
                        .map(|a| a.iter().filter_map(Value::as_str).filter(|c| !c.trim().is_empty()).map(String::from).collect())
                        .unwrap_or_default();
                    if commands.len() > 2 {
                        notes.push(format!("{}: judge asked for {} commands; only two run", charge.id, commands.len()));
                        commands.truncate(2);
                    }
                    if commands.is_empty() {
                        messages.push(Message::assistant(doc.to_string()));
                        messages.push(Message::user("List one or two commands under `commands`."));
                    }
                }
            }
        }
        if commands.is_empty() {
            // fall back to re-running the prosecutor's own evidence
            let fallback = charge
                .evidence
                .iter()
                .map(|e| e.command.clone())
                .find(|c| !c.is_empty() && !c.starts_with('('))
                .unwrap_or_else(|| "true".into());
            let (out, _) = session.run(&fallback);
            notes.push(format!("{}: judge gave no commands; re-ran the charge evidence and upheld", charge.id));
            return ChargeRuling {
                charge_id: charge.id.clone(),
                ruling: Ruling::Upheld,
                dismissal_reason: None,
                verification_commands: vec![fallback.clone()],
                outputs: vec![Exhibit {
                    command: fallback,
                    output: out,
                }],
                rationale: "no verification plan; upheld by default".into(),
            };
        }

        let outputs: Vec<Exhibit> = commands
            .iter()
            .map(|c| Exhibit {
                command: c.clone(),
                output: session.run(c).0,
            })
            .collect();
        messages.push(Message::assistant(serde_json::json!({"charge_id": charge.id, "commands": commands}).to_string()));
        messages.push(Message::user(format!(
            "{}\n\nNow rule on {}.",
            outputs
                .iter()
                .map(|o| format!("$ {}\n{}", o.command, o.output))
                .collect::<Vec<_>>()
                .join("\n\n"),
            charge.id
        )));

        let mut ruling = ChargeRuling {
            charge_id: charge.id.clone(),
            ruling: Ruling::Upheld,
            dismissal_reason: None,
            verification_commands: commands,
            outputs,
            rationale: "inconclusive; upheld".into(),
        };
        while let Some(doc) = self.ask(&messages, left, notes) {
            let rationale = text::str_field(&doc, "rationale").unwrap_or_default().to_string();
            match text::str_field(&doc, "ruling") {
                Some("upheld") => {
                    ruling.rationale = rationale;
                    return ruling;
                }
                Some("dismissed") => match text::str_field(&doc, "dismissal_reason").and_then(DismissalReason::parse) {
                    Some(reason) => {
                        ruling.ruling = Ruling::Dismissed;
                        ruling.dismissal_reason = Some(reason);
                        ruling.rationale = rationale;
                        return ruling;
                    }
                    None => {
                        messages.push(Message::assistant(doc.to_string()));
                        messages.push(Message::user(
                            "A dismissal needs dismissal_reason: contradicted, optional_dependency or external_factor.",
                        ));
                    }
                },
                _ => {
                    messages.push(Message::assistant(doc.to_string()));
                    messages.push(Message::user("Reply with `ruling`: upheld or dismissed."));
                }
            }
        }
        notes.push(format!("{}: no usable ruling; upheld", charge.id));
        ruling
    }
}

/// Prosecutor in `investigation`, judge in `review`.
pub fn adjudicate(
    llm: &Llm,
    prompts: &Prompts,
    cfg: &AdjudicationConfig,
    trajectory: &Trajectory,
    investigation: &mut Sandbox,
    review: &mut Sandbox,
) -> Adjudication {
    let prosecution = Prosecutor::new(llm, prompts, cfg.clone()).prosecute(investigation, trajectory);
    let mut notes = prosecution.notes;
    let (verdict, judge_notes) = Judge::new(llm, prompts, cfg.clone()).judge(&prosecution.charges, review);
    notes.extend(judge_notes);
    Adjudication::new(prosecution.charges, verdict, notes)
}
