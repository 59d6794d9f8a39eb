//! The in-loop verifier: a short read-only session that runs the project's
//! tests and says whether remaining failures come from the setup or from the
//! project itself.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{Llm, Message, Role};
use crate::prompts::{PromptKind, Prompts};
use crate::sandbox::Sandbox;
use crate::shell;
use crate::text;
use crate::trajectory::Step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierOutcome {
    Pass,
    SetupInducedFailure,
    ProjectIntrinsic,
}

impl VerifierOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifierOutcome::Pass => "pass",
            VerifierOutcome::SetupInducedFailure => "setup_induced_failure",
            VerifierOutcome::ProjectIntrinsic => "project_intrinsic",
        }
    }

    /// Project-intrinsic findings do not block FINISH.
    pub fn permits_finish(self) -> bool {
        matches!(self, VerifierOutcome::Pass | VerifierOutcome::ProjectIntrinsic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reconnaissance,
    LocateTests,
    RunTests,
    Analyze,
}

impl Phase {
    fn parse(s: &str) -> Option<Phase> {
        match s {
            "reconnaissance" => Some(Phase::Reconnaissance),
            "locate_tests" => Some(Phase::LocateTests),
            "run_tests" | "smoke" => Some(Phase::RunTests),
            "analyze" => Some(Phase::Analyze),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub command: String,
    pub excerpt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub outcome: VerifierOutcome,
    pub evidence: Vec<Evidence>,
    pub notes: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Allow,
    Block(String),
}

const VCS_READ_ONLY: &[&str] = &[
    "status", "log", "diff", "show", "ls-files", "rev-parse", "describe", "blame", "grep", "branch", "remote",
];

fn mutating_verbs(program: &str) -> Option<&'static [&'static str]> {
    Some(match program {
        "pip" | "pip3" | "pipx" | "easy_install" => &["install", "uninstall", "download", "wheel", "inject"],
        "uv" => &["add", "remove", "sync", "lock", "install", "uninstall", "venv"],
        "poetry" | "pdm" => &["add", "remove", "install", "update", "lock", "sync", "self"],
        "conda" | "mamba" | "micromamba" => &["install", "remove", "uninstall", "update", "upgrade", "create", "env"],
        "apt" | "apt-get" | "aptitude" => &["install", "remove", "purge", "upgrade", "dist-upgrade", "autoremove", "update"],
        "yum" | "dnf" => &["install", "remove", "erase", "update", "upgrade"],
        "apk" => &["add", "del", "upgrade", "update"],
        "npm" | "pnpm" | "yarn" => &["install", "i", "ci", "add", "remove", "uninstall", "un", "rm", "update", "upgrade", "link"],
        "gem" => &["install", "uninstall", "update"],
        "cargo" => &["install", "uninstall", "add", "remove", "update"],
        "go" => &["install", "get"],
        "brew" => &["install", "uninstall", "upgrade", "reinstall"],
        "setup.py" => &["install", "develop"],
        _ => return None,
    })
}

const ENV_MUTATORS: &[&str] = &["export", "unset", "setenv", "alias"];

fn basename(word: &str) -> &str {
    word.rsplit('/').next().unwrap_or(word)
}

fn is_flag(w: &str) -> bool {
    w.starts_with('-')
}

fn writable(cwd: &str, target: &str) -> bool {
    if target.is_empty() || target == "/dev/null" || target == "-" {
        return true;
    }
    let p = shell::resolve_path(cwd, target);
    shell::is_scratch_path(&p) || p == "/dev/null"
}

/// Paths a file-writing utility would modify, if `program` is one.
fn write_targets<'a>(program: &str, args: &'a [String]) -> Vec<&'a str> {
    let plain: Vec<&str> = args.iter().map(String::as_str).filter(|a| !is_flag(a)).collect();
    match program {
        "tee" | "touch" | "rm" | "rmdir" | "mkdir" | "truncate" | "shred" | "unlink" => plain,
        "cp" | "mv" | "ln" | "rsync" | "install" => plain.last().copied().into_iter().collect(),
        "chmod" | "chown" | "chgrp" => plain.into_iter().skip(1).collect(),
        "sed" | "perl" if args.iter().any(|a| a == "-i" || a.starts_with("-i")) => {
            plain.into_iter().skip(1).collect()
        }
        "dd" => args.iter().filter_map(|a| a.strip_prefix("of=")).collect(),
        "curl" | "wget" => args
            .windows(2)
            .filter(|w| matches!(w[0].as_str(), "-o" | "-O" | "--output" | "--output-document"))
            .map(|w| w[1].as_str())
            .collect(),
        "patch" | "tar" | "unzip" => vec!["."],
        _ => Vec::new(),
    }
}

fn check_segment(seg: &shell::Segment, cwd: &mut String) -> FilterDecision {
    for r in seg.redirects.iter().filter(|r| r.is_write()) {
        if !writable(cwd, &r.target) {
            return FilterDecision::Block(format!("write redirection to {}", r.target));
        }
    }
    // skip assignments and wrappers to find the effective program
    let mut words: &[String] = &seg.words;
    loop {
        match words.first().map(|w| basename(w)) {
            Some(w) if w.contains('=') && !w.starts_with('=') && !w.starts_with('-') => words = &words[1..],
            Some("sudo" | "env" | "nohup" | "nice" | "time" | "command" | "exec" | "xargs") => words = &words[1..],
            Some("timeout") => words = &words[words.len().min(2)..],
            _ => break,
        }
    }
    let Some(first) = words.first() else {
        return FilterDecision::Allow;
    };
    let program = basename(first);
    let args = &words[1..];

    if program == "cd" {
        if let Some(d) = args.first() {
            *cwd = shell::resolve_path(cwd, d);
        }
        return FilterDecision::Allow;
    }
    if ENV_MUTATORS.contains(&program) {
        return FilterDecision::Block(format!("environment change via {program}"));
    }
    if program == "git" {
        let mut i = 0;
        while i < args.len() && is_flag(&args[i]) {
            i += if matches!(args[i].as_str(), "-C" | "-c") { 2 } else { 1 };
        }
        return match args.get(i) {
            Some(sub) if VCS_READ_ONLY.contains(&sub.as_str()) => FilterDecision::Allow,
            Some(sub) => FilterDecision::Block(format!("version-control mutation: git {sub}")),
            None => FilterDecision::Allow,
        };
    }
    for (i, w) in words.iter().enumerate() {
        if let Some(verbs) = mutating_verbs(basename(w)) {
            if let Some(v) = words[i + 1..].iter().find(|a| !is_flag(a) && verbs.contains(&a.as_str())) {
                return FilterDecision::Block(format!("package-manager mutation: {} {v}", basename(w)));
            }
        }
    }
    for t in write_targets(program, args) {
        if !writable(cwd, t) {
            return FilterDecision::Block(format!("{program} writes to {t}"));
        }
    }
    FilterDecision::Allow
}

/// Lexical read-only check, relative to working directory `cwd`.
pub fn readonly_filter_in(command: &str, cwd: &str) -> FilterDecision {
    for inner in shell::substitutions(command) {
        if let FilterDecision::Block(r) = readonly_filter_in(&inner, cwd) {
            return FilterDecision::Block(r);
        }
    }
    let mut cwd = cwd.to_string();
    for seg in shell::parse(command) {
        if let d @ FilterDecision::Block(_) = check_segment(&seg, &mut cwd) {
            return d;
        }
    }
    FilterDecision::Allow
}

/// Lexical read-only check for commands run from the repository root.
pub fn readonly_filter(command: &str) -> FilterDecision {
    readonly_filter_in(command, "/workspace/repo")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub budget: usize,
    /// Seconds.
    pub command_timeout: f64,
    pub workdir: String,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            budget: 12,
            command_timeout: 900.0,
            workdir: "/workspace/repo".into(),
        }
    }
}

pub struct Verifier<'a> {
    llm: &'a Llm,
    prompts: &'a Prompts,
    cfg: VerifierConfig,
}

enum Reply {
    Command { phase: Phase, command: String },
    Report(Value),
}

fn parse_reply(reply: &str) -> Result<Reply, String> {
    let doc = text::extract_json(reply)?;
    let phase = doc.get("phase").and_then(Value::as_str).unwrap_or_default();
    if phase == "report" || doc.get("outcome").is_some() {
        return Ok(Reply::Report(doc));
    }
    let phase = Phase::parse(phase).ok_or_else(|| format!("unknown phase `{phase}`"))?;
    let command = doc
        .get("command")
        .and_then(Value::as_str)
        .filter(|c| !c.trim().is_empty())
        .ok_or("missing `command`")?
        .to_string();
    Ok(Reply::Command { phase, command })
}

impl<'a> Verifier<'a> {
    pub fn new(llm: &'a Llm, prompts: &'a Prompts, cfg: VerifierConfig) -> Self {
        Self { llm, prompts, cfg }
    }

    pub fn verify(&self, sandbox: &mut Sandbox, tail: &[Step]) -> VerifierReport {
        sandbox.backend_mut().set_write_guard(true);
        let report = self.session(sandbox, tail);
        sandbox.backend_mut().set_write_guard(false);
        report
    }

    fn session(&self, sandbox: &mut Sandbox, tail: &[Step]) -> VerifierReport {
        let timeout = Duration::from_secs_f64(self.cfg.command_timeout);
        let context: Vec<String> = tail.iter().map(|s| s.render(1000)).collect();
        let mut messages = vec![
            Message::system(self.prompts.raw(PromptKind::Verifier)),
            Message::user(format!(
                "Repository root: {}\n\nRecent setup steps:\n{}\n\nBegin with reconnaissance.",
                self.cfg.workdir,
                context.join("\n\n")
            )),
        ];
        let mut phase = Phase::Reconnaissance;
        let mut evidence: Vec<Evidence> = Vec::new();
        let mut blocked: Vec<String> = Vec::new();

        for _ in 0..self.cfg.budget {
            let reply = match self.llm.chat(Role::Verifier, &messages) {
                Ok(r) => r,
                Err(e) => {
                    return finalize_inconclusive(evidence, blocked, &format!("verifier model unavailable: {e}"));
                }
            };
            messages.push(Message::assistant(reply.clone()));
            let observation = match parse_reply(&reply) {
                Err(e) => format!("could not read your reply ({e}); answer with the JSON format described"),
                Ok(Reply::Report(doc)) => return finalize(&doc, evidence, blocked),
                Ok(Reply::Command { phase: p, command }) if p < phase => format!(
                    "phase {p:?} is already complete; continue with {phase:?} or a later phase. `{command}` was not run"
                ),
                Ok(Reply::Command { phase: p, command }) => {
                    phase = p;
                    match readonly_filter_in(&command, &self.cfg.workdir) {
                        FilterDecision::Block(reason) => {
                            blocked.push(format!("{command} ({reason})"));
                            format!("blocked: read-only constraint ({reason})")
                        }
                        FilterDecision::Allow => match sandbox.exec(&command, timeout) {
                            Ok(r) => {
                                let excerpt = r.excerpt(2000);
                                evidence.push(Evidence {
                                    command: command.clone(),
                                    excerpt: excerpt.clone(),
                                    exit_code: Some(r.exit_code),
                                    phase: Some(p),
                                });
                                excerpt
                            }
                            Err(e) => format!("execution error: {e}"),
                        },
                    }
                }
            };
            messages.push(Message::user(observation));
        }
        finalize_inconclusive(
            evidence,
            blocked,
            &format!("verification inconclusive: no report within {} steps", self.cfg.budget),
        )
    }
}

fn blocked_notes(blocked: &[String]) -> String {
    blocked.iter().map(|b| format!("\nblocked: {b}")).collect()
}

fn finalize_inconclusive(mut evidence: Vec<Evidence>, blocked: Vec<String>, why: &str) -> VerifierReport {
    if evidence.is_empty() {
        evidence.push(Evidence {
            command: "(none)".into(),
            excerpt: why.to_string(),
            exit_code: None,
            phase: None,
        });
    }
    VerifierReport {
        outcome: VerifierOutcome::SetupInducedFailure,
        evidence,
        notes: format!("{why}{}", blocked_notes(&blocked)),
        blocked,
    }
}

fn finalize(doc: &Value, mut evidence: Vec<Evidence>, blocked: Vec<String>) -> VerifierReport {
    let claimed = match doc.get("outcome").and_then(Value::as_str) {
        Some("pass") => Some(VerifierOutcome::Pass),
        Some("setup_induced_failure") => Some(VerifierOutcome::SetupInducedFailure),
        Some("project_intrinsic") => Some(VerifierOutcome::ProjectIntrinsic),
        _ => None,
    };
    let mut notes = doc.get("notes").and_then(Value::as_str).unwrap_or_default().to_string();
    let failures = doc.get("failures").and_then(Value::as_array).cloned().unwrap_or_default();
    let setup_failures: Vec<&Value> = failures
        .iter()
        .filter(|f| f.get("attribution").and_then(Value::as_str) != Some("project"))
        .collect();

    let mut outcome = match claimed {
        None => {
            notes = format!("unrecognized outcome in report; treated as setup_induced_failure. {notes}");
            VerifierOutcome::SetupInducedFailure
        }
        Some(o) => o,
    };
    if outcome != VerifierOutcome::SetupInducedFailure && !setup_failures.is_empty() {
        notes.push_str("\nat least one failure is attributed to the setup");
        outcome = VerifierOutcome::SetupInducedFailure;
    }
    let ran_ok = evidence
        .iter()
        .any(|e| e.phase == Some(Phase::RunTests) && e.exit_code == Some(0));
    if outcome == VerifierOutcome::Pass && !ran_ok {
        notes.push_str("\npass claimed without a passing test run; downgraded");
        outcome = VerifierOutcome::SetupInducedFailure;
    }
    if outcome == VerifierOutcome::SetupInducedFailure && evidence.is_empty() {
        let text = setup_failures
            .iter()
            .filter_map(|f| f.get("evidence").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("\n");
        evidence.push(Evidence {
            command: "(none)".into(),
            excerpt: if text.is_empty() { notes.clone() } else { text },
            exit_code: None,
            phase: None,
        });
    }
    VerifierReport {
        outcome,
        evidence,
        notes: format!("{}{}", notes.trim(), blocked_notes(&blocked)),
        blocked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, HashEmbedder, ScriptedChat};
    use crate::sandbox::{SimFixture, Simulator};
    use serde_json::json;
    use std::sync::Arc;

    fn blocked(cmd: &str) -> bool {
        matches!(readonly_filter(cmd), FilterDecision::Block(_))
    }

    #[test]
    fn filter_table() {
        for cmd in [
            "pip install x",
            "python -m pip install -e .",
            "uv pip install x",
            "poetry add requests",
            "apt-get install -y libxml2",
            "conda install numpy",
            "npm ci",
            "echo hi > /workspace/repo/x",
            "echo hi > x",
            "echo hi >> ~/.bashrc",
            "sed -i s/a/b/ setup.cfg",
            "rm -rf build",
            "touch conftest.py",
            "cp /tmp/a /workspace/repo/a",
            "git checkout main",
            "git -C /workspace/repo reset --hard",
            "export PYTHONPATH=src",
            "ls $(pip install x)",
            "cat README.md | tee notes.txt",
            "sudo apt install gcc",
            "python setup.py develop",
            "curl -o /usr/local/bin/x https://example.com/x",
        ] {
            assert!(blocked(cmd), "{cmd} should be blocked");
        }
        for cmd in [
            "cat README.md",
            "ls -la",
            "pytest -q",
            "python -m pytest tests/ 2>&1 | tail -n 50",
            "echo hi > /tmp/smoke.py",
            "cd /tmp && echo 'import x' > smoke.py && python smoke.py",
            "pip list",
            "pip show numpy",
            "poetry run pytest",
            "git status",
            "git log --oneline -5",
            "pytest > /dev/null 2>&1",
            "tox -e py311",
            "mkdir -p /tmp/out",
            "grep -r 'pip install' README.md",
        ] {
            assert_eq!(readonly_filter(cmd), FilterDecision::Allow, "{cmd}");
        }
    }

    fn run(fixture: serde_json::Value, script: Vec<serde_json::Value>) -> (VerifierReport, Sandbox, Arc<Gateway>) {
        let chat = ScriptedChat::new();
        for s in script {
            chat.push_json(Role::Verifier, &s);
        }
        let gw = Arc::new(Gateway::new(Arc::new(chat), Arc::new(HashEmbedder::new(8, 0))));
        let llm = Llm::new(gw.clone(), "v");
        let prompts = Prompts::default();
        let fixture: SimFixture = serde_json::from_value(fixture).unwrap();
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture)));
        let report = Verifier::new(&llm, &prompts, VerifierConfig::default()).verify(&mut sb, &[]);
        (report, sb, gw)
    }

    fn state(sb: &Sandbox) -> crate::sandbox::SimState {
        sb.backend_as::<Simulator>().unwrap().state().clone()
    }

    #[test]
    fn passing_tests_pass() {
        let (r, _, _) = run(
            json!({"rules": [{"pattern": "^pytest", "stdout": "5 passed"}]}),
            vec![
                json!({"phase": "reconnaissance", "command": "ls"}),
                json!({"phase": "run_tests", "command": "pytest -q"}),
                json!({"phase": "report", "outcome": "pass", "notes": "all green"}),
            ],
        );
        assert_eq!(r.outcome, VerifierOutcome::Pass);
        assert_eq!(r.evidence.len(), 2);
    }

    #[test]
    fn setup_failure_keeps_evidence() {
        let (r, _, _) = run(
            json!({"rules": [{"pattern": "^pytest", "exit_code": 1, "stderr": "ModuleNotFoundError: No module named 'yaml'"}]}),
            vec![
                json!({"phase": "run_tests", "command": "pytest"}),
                json!({"phase": "report", "outcome": "setup_induced_failure",
                       "failures": [{"test": "t", "attribution": "setup", "evidence": "yaml missing"}]}),
            ],
        );
        assert_eq!(r.outcome, VerifierOutcome::SetupInducedFailure);
        assert!(r.evidence[0].excerpt.contains("ModuleNotFoundError"));
    }

    #[test]
    fn blocked_install_leaves_state_untouched() {
        let fixture = json!({
            "initial": {"files": {"/workspace/repo/setup.py": ""}},
            "rules": [
                {"pattern": "^pip install", "effects": [{"write": {"path": "/usr/lib/x", "content": ""}}]},
                {"pattern": "^pytest", "stdout": "ok"}
            ]
        });
        let fixture_state: SimFixture = serde_json::from_value(fixture.clone()).unwrap();
        let (r, sb, _) = run(
            fixture,
            vec![
                json!({"phase": "reconnaissance", "command": "pip install pytest"}),
                json!({"phase": "run_tests", "command": "echo 'def test(): pass' > /tmp/smoke_test.py"}),
                json!({"phase": "run_tests", "command": "pytest /tmp/smoke_test.py"}),
                json!({"phase": "report", "outcome": "pass"}),
            ],
        );
        assert_eq!(r.outcome, VerifierOutcome::Pass);
        assert_eq!(r.blocked.len(), 1);
        assert!(r.notes.contains("blocked: pip install pytest"));
        assert_eq!(state(&sb).outside_scratch(), fixture_state.initial.outside_scratch());
    }

    #[test]
    fn pass_without_test_run_is_downgraded() {
        let (r, _, _) = run(json!({}), vec![json!({"phase": "report", "outcome": "pass"})]);
        assert_eq!(r.outcome, VerifierOutcome::SetupInducedFailure);
        assert!(!r.evidence.is_empty());
    }

    #[test]
    fn mixed_attribution_is_setup_failure() {
        let (r, _, _) = run(
            json!({"rules": [{"pattern": "^pytest", "exit_code": 1, "stdout": "2 failed"}]}),
            vec![
                json!({"phase": "run_tests", "command": "pytest"}),
                json!({"phase": "report", "outcome": "project_intrinsic", "failures": [
                    {"test": "a", "attribution": "project"}, {"test": "b", "attribution": "setup"}]}),
            ],
        );
        assert_eq!(r.outcome, VerifierOutcome::SetupInducedFailure);
    }

    #[test]
    fn exhausted_budget_is_inconclusive() {
        let script = (0..12).map(|_| json!({"phase": "reconnaissance", "command": "ls"})).collect();
        let (r, _, gw) = run(json!({}), script);
        assert_eq!(r.outcome, VerifierOutcome::SetupInducedFailure);
        assert!(r.notes.contains("verification inconclusive"));
        assert_eq!(gw.calls_for(Role::Verifier), 12);
    }

    #[test]
    fn phases_do_not_go_backwards() {
        let (r, sb, _) = run(
            json!({"rules": [{"pattern": "^pytest", "stdout": "ok"}]}),
            vec![
                json!({"phase": "run_tests", "command": "pytest"}),
                json!({"phase": "reconnaissance", "command": "ls /"}),
                json!({"phase": "report", "outcome": "pass"}),
            ],
        );
        assert_eq!(r.evidence.len(), 1);
        assert_eq!(sb.backend_as::<Simulator>().unwrap().history(), ["pytest"]);
    }
}
