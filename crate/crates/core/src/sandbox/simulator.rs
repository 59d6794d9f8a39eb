//! Deterministic in-memory sandbox.
//!
//! State is a filesystem map, an environment map and a working directory.
//! Commands are resolved against a fixture rule table first and a handful of
//! builtins second; anything else exits 127. Time is virtual: each rule
//! declares a duration, and a command whose accumulated duration exceeds its
//! timeout stops with the timeout sentinel.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ExecResult, SandboxBackend, SandboxError, SandboxProvider, NOT_FOUND_EXIT_CODE, TIMEOUT_EXIT_CODE};
use crate::shell::{self, Joiner, Segment};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimState {
    pub files: BTreeMap<String, String>,
    pub dirs: BTreeSet<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: String,
}

impl Default for SimState {
    fn default() -> Self {
        Self {
            files: BTreeMap::new(),
            dirs: BTreeSet::new(),
            env: BTreeMap::new(),
            cwd: "/".to_string(),
        }
    }
}

impl SimState {
    pub fn is_dir(&self, path: &str) -> bool {
        if path == "/" || self.dirs.contains(path) {
            return true;
        }
        let prefix = format!("{path}/");
        self.files.keys().any(|k| k.starts_with(&prefix)) || self.dirs.iter().any(|d| d.starts_with(&prefix))
    }

    pub fn exists(&self, path: &str) -> bool {
        self.files.contains_key(path) || self.is_dir(path)
    }

    /// The state with everything under `/tmp` removed.
    pub fn outside_scratch(&self) -> SimState {
        SimState {
            files: self
                .files
                .iter()
                .filter(|(k, _)| !shell::is_scratch_path(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            dirs: self.dirs.iter().filter(|d| !shell::is_scratch_path(d)).cloned().collect(),
            env: self.env.clone(),
            cwd: self.cwd.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Condition {
    pub file_exists: Vec<String>,
    pub file_absent: Vec<String>,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Write { path: String, content: String },
    Append { path: String, content: String },
    Remove { path: String },
    SetEnv { key: String, value: String },
    UnsetEnv { key: String },
    Chdir { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRule {
    /// Regex matched against the whole command, or against one simple command
    /// of a chain.
    pub pattern: String,
    #[serde(default)]
    pub when: Condition,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub duration: f64,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimFixture {
    pub initial: SimState,
    pub rules: Vec<SimRule>,
}

impl SimFixture {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

struct CompiledRule {
    re: Regex,
    rule: SimRule,
}

type Rules = Arc<Vec<CompiledRule>>;

fn compile_rules(rules: &[SimRule]) -> Result<Rules, SandboxError> {
    rules
        .iter()
        .map(|r| {
            Regex::new(&r.pattern)
                .map(|re| CompiledRule { re, rule: r.clone() })
                .map_err(|e| SandboxError::Backend(format!("bad rule pattern `{}`: {e}", r.pattern)))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Arc::new)
}

#[derive(Clone)]
struct Image {
    state: SimState,
    rules: Rules,
}

type Registry = Arc<Mutex<HashMap<String, Image>>>;

pub struct Simulator {
    rules: Rules,
    state: SimState,
    snapshots: HashMap<String, SimState>,
    registry: Registry,
    write_guard: bool,
    history: Vec<String>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("state", &self.state)
            .field("rules", &self.rules.len())
            .finish()
    }
}

/// Per-command scratch: output streams, chain-local env and cwd, virtual time.
struct Run {
    env: BTreeMap<String, String>,
    cwd: String,
    elapsed: f64,
}

struct SegOut {
    stdout: String,
    stderr: String,
    code: i32,
}

impl SegOut {
    fn ok(stdout: impl Into<String>) -> Self {
        SegOut {
            stdout: stdout.into(),
            stderr: String::new(),
            code: 0,
        }
    }

    fn err(code: i32, stderr: impl Into<String>) -> Self {
        SegOut {
            stdout: String::new(),
            stderr: stderr.into(),
            code,
        }
    }
}

impl Simulator {
    /// Panics if a rule pattern does not compile; use [`Simulator::try_new`]
    /// for untrusted fixtures.
    pub fn new(fixture: SimFixture) -> Self {
        Self::try_new(fixture).expect("invalid simulator fixture")
    }

    pub fn try_new(fixture: SimFixture) -> Result<Self, SandboxError> {
        let rules = compile_rules(&fixture.rules)?;
        Ok(Self::from_parts(rules, fixture.initial, Arc::default()))
    }

    fn from_parts(rules: Rules, state: SimState, registry: Registry) -> Self {
        Self {
            rules,
            state,
            snapshots: HashMap::new(),
            registry,
            write_guard: false,
            history: Vec::new(),
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Commands executed so far, in order.
    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshots.len()
    }

    fn guard(&self, path: &str) -> Result<(), String> {
        if self.write_guard && !shell::is_scratch_path(path) && path != "/dev/null" {
            Err(format!("read-only: write to {path} denied"))
        } else {
            Ok(())
        }
    }

    fn condition_holds(&self, cond: &Condition, run: &Run) -> bool {
        cond.file_exists
            .iter()
            .all(|p| self.state.exists(&shell::resolve_path(&run.cwd, p)))
            && cond
                .file_absent
                .iter()
                .all(|p| !self.state.exists(&shell::resolve_path(&run.cwd, p)))
            && cond.env.iter().all(|(k, v)| run.env.get(k) == Some(v))
    }

    fn find_rule(&self, text: &str, run: &Run) -> Option<usize> {
        self.rules
            .iter()
            .position(|r| r.re.is_match(text) && self.condition_holds(&r.rule.when, run))
    }

    fn apply_effects(&mut self, effects: &[Effect], run: &mut Run) -> Result<(), String> {
        if self.write_guard {
            for e in effects {
                match e {
                    Effect::Write { path, .. } | Effect::Append { path, .. } | Effect::Remove { path } => {
                        self.guard(&shell::resolve_path(&run.cwd, path))?
                    }
                    _ => return Err("read-only: environment changes denied".into()),
                }
            }
        }
        for e in effects {
            match e {
                Effect::Write { path, content } => {
                    let p = shell::resolve_path(&run.cwd, path);
                    self.state.files.insert(p, content.clone());
                }
                Effect::Append { path, content } => {
                    let p = shell::resolve_path(&run.cwd, path);
                    self.state.files.entry(p).or_default().push_str(content);
                }
                Effect::Remove { path } => {
                    let p = shell::resolve_path(&run.cwd, path);
                    self.remove_tree(&p);
                }
                Effect::SetEnv { key, value } => {
                    self.state.env.insert(key.clone(), value.clone());
                    run.env.insert(key.clone(), value.clone());
                }
                Effect::UnsetEnv { key } => {
                    self.state.env.remove(key);
                    run.env.remove(key);
                }
                Effect::Chdir { path } => {
                    let p = shell::resolve_path(&run.cwd, path);
                    self.state.cwd = p.clone();
                    run.cwd = p;
                }
            }
        }
        Ok(())
    }

    fn remove_tree(&mut self, path: &str) -> bool {
        let prefix = format!("{path}/");
        let mut found = self.state.files.remove(path).is_some() | self.state.dirs.remove(path);
        let before = self.state.files.len() + self.state.dirs.len();
        self.state.files.retain(|k, _| !k.starts_with(&prefix));
        self.state.dirs.retain(|k| !k.starts_with(&prefix));
        found |= before != self.state.files.len() + self.state.dirs.len();
        found
    }

    fn expand(word: &str, env: &BTreeMap<String, String>) -> String {
        static VAR: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
        let re = VAR.get_or_init(|| Regex::new(r"\$(?:\{([A-Za-z_][A-Za-z0-9_]*)\}|([A-Za-z_][A-Za-z0-9_]*))").unwrap());
        re.replace_all(word, |c: &regex::Captures| {
            let name = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
            env.get(name).cloned().unwrap_or_default()
        })
        .into_owned()
    }

    fn run_segment(&mut self, seg: &Segment, stdin: &str, run: &mut Run, timeout: f64) -> Result<SegOut, SegOut> {
        let words: Vec<String> = seg.words.iter().map(|w| Self::expand(w, &run.env)).collect();
        let mut stdin = stdin.to_string();
        for r in seg.redirects.iter().filter(|r| r.op == "<") {
            let p = shell::resolve_path(&run.cwd, &Self::expand(&r.target, &run.env));
            match self.state.files.get(&p) {
                Some(c) => stdin = c.clone(),
                None => return Ok(SegOut::err(1, format!("sh: 1: cannot open {}: No such file\n", r.target))),
            }
        }
        let text = shell_words::join(&words);
        let mut out = if let Some(i) = self.find_rule(&text, run) {
            let rule = self.rules[i].rule.clone();
            if run.elapsed + rule.duration > timeout {
                run.elapsed = timeout;
                return Err(SegOut::err(TIMEOUT_EXIT_CODE, String::new()));
            }
            run.elapsed += rule.duration;
            if let Err(e) = self.apply_effects(&rule.effects, run) {
                SegOut::err(1, format!("{e}\n"))
            } else {
                SegOut {
                    stdout: rule.stdout,
                    stderr: rule.stderr,
                    code: rule.exit_code,
                }
            }
        } else if words.is_empty() {
            SegOut::ok("")
        } else {
            self.builtin(&words, &stdin, run, timeout)?
        };
        self.apply_redirects(seg, &mut out, run);
        Ok(out)
    }

    fn apply_redirects(&mut self, seg: &Segment, out: &mut SegOut, run: &Run) {
        for r in &seg.redirects {
            let fd = r.fd.unwrap_or(1);
            if r.op == ">&" {
                if fd == 2 && r.target == "1" {
                    out.stdout.push_str(&std::mem::take(&mut out.stderr));
                } else if fd == 1 && r.target == "2" {
                    out.stderr.push_str(&std::mem::take(&mut out.stdout));
                }
                continue;
            }
            if !r.is_write() {
                continue;
            }
            let data = if fd == 2 {
                std::mem::take(&mut out.stderr)
            } else {
                std::mem::take(&mut out.stdout)
            };
            let target = Self::expand(&r.target, &run.env);
            if target == "/dev/null" {
                continue;
            }
            let p = shell::resolve_path(&run.cwd, &target);
            if let Err(e) = self.guard(&p) {
                out.stderr.push_str(&format!("{e}\n"));
                out.code = 1;
                continue;
            }
            if r.op == ">>" {
                self.state.files.entry(p).or_default().push_str(&data);
            } else {
                self.state.files.insert(p, data);
            }
        }
    }

    fn builtin(&mut self, words: &[String], stdin: &str, run: &mut Run, timeout: f64) -> Result<SegOut, SegOut> {
        let args = &words[1..];
        let cwd = run.cwd.clone();
        let path = |p: &str| shell::resolve_path(&cwd, p);
        let out = match words[0].as_str() {
            "true" | ":" => SegOut::ok(""),
            "false" => SegOut::err(1, ""),
            "echo" => {
                let (newline, rest) = match args.first().map(String::as_str) {
                    Some("-n") => (false, &args[1..]),
                    _ => (true, args),
                };
                let mut s = rest.join(" ");
                if newline {
                    s.push('\n');
                }
                SegOut::ok(s)
            }
            "cat" => {
                if args.is_empty() {
                    return Ok(SegOut::ok(stdin));
                }
                let mut out = SegOut::ok("");
                for a in args {
                    match self.state.files.get(&path(a)) {
                        Some(c) => out.stdout.push_str(c),
                        None => {
                            out.stderr.push_str(&format!("cat: {a}: No such file or directory\n"));
                            out.code = 1;
                        }
                    }
                }
                out
            }
            "tee" => {
                let append = args.iter().any(|a| a == "-a");
                for a in args.iter().filter(|a| !a.starts_with('-')) {
                    let p = path(a);
                    if let Err(e) = self.guard(&p) {
                        return Ok(SegOut::err(1, format!("{e}\n")));
                    }
                    if append {
                        self.state.files.entry(p).or_default().push_str(stdin);
                    } else {
                        self.state.files.insert(p, stdin.to_string());
                    }
                }
                SegOut::ok(stdin)
            }
            "ls" => {
                let targets: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
                let dir = targets.first().map(|a| path(a)).unwrap_or_else(|| run.cwd.clone());
                if self.state.files.contains_key(&dir) {
                    return Ok(SegOut::ok(format!("{}\n", targets[0])));
                }
                if !self.state.is_dir(&dir) {
                    return Ok(SegOut::err(
                        2,
                        format!("ls: cannot access '{}': No such file or directory\n", dir),
                    ));
                }
                let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
                let names: BTreeSet<&str> = self
                    .state
                    .files
                    .keys()
                    .chain(self.state.dirs.iter())
                    .filter_map(|k| k.strip_prefix(prefix.as_str()))
                    .filter_map(|rest| rest.split('/').next())
                    .filter(|n| !n.is_empty())
                    .collect();
                SegOut::ok(names.into_iter().map(|n| format!("{n}\n")).collect::<String>())
            }
            "pwd" => SegOut::ok(format!("{}\n", run.cwd)),
            "touch" => {
                for a in args {
                    let p = path(a);
                    if let Err(e) = self.guard(&p) {
                        return Ok(SegOut::err(1, format!("{e}\n")));
                    }
                    self.state.files.entry(p).or_default();
                }
                SegOut::ok("")
            }
            "rm" => {
                let force = args.iter().any(|a| a.starts_with('-') && a.contains('f'));
                let mut out = SegOut::ok("");
                for a in args.iter().filter(|a| !a.starts_with('-')) {
                    let p = path(a);
                    if let Err(e) = self.guard(&p) {
                        return Ok(SegOut::err(1, format!("{e}\n")));
                    }
                    if !self.remove_tree(&p) && !force {
                        out.stderr
                            .push_str(&format!("rm: cannot remove '{a}': No such file or directory\n"));
                        out.code = 1;
                    }
                }
                out
            }
            "mkdir" => {
                for a in args.iter().filter(|a| !a.starts_with('-')) {
                    let p = path(a);
                    if let Err(e) = self.guard(&p) {
                        return Ok(SegOut::err(1, format!("{e}\n")));
                    }
                    self.state.dirs.insert(p);
                }
                SegOut::ok("")
            }
            "cd" => {
                let target = args.first().map(|a| path(a)).unwrap_or_else(|| "/root".to_string());
                if self.state.is_dir(&target) {
                    run.cwd = target;
                    SegOut::ok("")
                } else {
                    SegOut::err(2, format!("sh: 1: cd: can't cd to {}\n", args.first().map_or("", |s| s)))
                }
            }
            "printenv" => match args.first() {
                Some(k) => match run.env.get(k) {
                    Some(v) => SegOut::ok(format!("{v}\n")),
                    None => SegOut::err(1, ""),
                },
                None => SegOut::ok(run.env.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>()),
            },
            "env" => SegOut::ok(run.env.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>()),
            "export" => {
                for a in args {
                    if let Some((k, v)) = a.split_once('=') {
                        run.env.insert(k.to_string(), v.to_string());
                    }
                }
                SegOut::ok("")
            }
            "unset" => {
                for a in args {
                    run.env.remove(a);
                }
                SegOut::ok("")
            }
            "test" | "[" => {
                let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
                if words[0] == "[" && a.last() == Some(&"]") {
                    a.pop();
                }
                let negate = a.first() == Some(&"!");
                if negate {
                    a.remove(0);
                }
                let holds = match a.as_slice() {
                    ["-e", p] => self.state.exists(&path(p)),
                    ["-f", p] => self.state.files.contains_key(&path(p)),
                    ["-d", p] => self.state.is_dir(&path(p)),
                    ["-n", s] => !s.is_empty(),
                    ["-z", s] => s.is_empty(),
                    [x, "=", y] | [x, "==", y] => x == y,
                    [x, "!=", y] => x != y,
                    [s] => !s.is_empty(),
                    _ => false,
                };
                if holds != negate {
                    SegOut::ok("")
                } else {
                    SegOut::err(1, "")
                }
            }
            "grep" => {
                let quiet = args.iter().any(|a| a == "-q");
                let rest: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
                let Some(pattern) = rest.first() else {
                    return Ok(SegOut::err(2, "usage: grep PATTERN [FILE...]\n"));
                };
                let re = match Regex::new(pattern) {
                    Ok(re) => re,
                    Err(_) => return Ok(SegOut::err(2, "grep: invalid pattern\n")),
                };
                let mut hay = String::new();
                if rest.len() == 1 {
                    hay.push_str(stdin);
                }
                for f in &rest[1..] {
                    match self.state.files.get(&path(f)) {
                        Some(c) => hay.push_str(c),
                        None => return Ok(SegOut::err(2, format!("grep: {f}: No such file or directory\n"))),
                    }
                }
                let hits: String = hay.lines().filter(|l| re.is_match(l)).map(|l| format!("{l}\n")).collect();
                if hits.is_empty() {
                    SegOut::err(1, "")
                } else if quiet {
                    SegOut::ok("")
                } else {
                    SegOut::ok(hits)
                }
            }
            "sleep" => {
                let secs: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0.0);
                if run.elapsed + secs > timeout {
                    run.elapsed = timeout;
                    return Err(SegOut::err(TIMEOUT_EXIT_CODE, ""));
                }
                run.elapsed += secs;
                SegOut::ok("")
            }
            "exit" => SegOut::err(args.first().and_then(|s| s.parse().ok()).unwrap_or(0), ""),
            other => SegOut::err(NOT_FOUND_EXIT_CODE, format!("sh: 1: {other}: not found\n")),
        };
        Ok(out)
    }

    fn run_command(&mut self, command: &str, timeout: f64) -> ExecResult {
        let mut run = Run {
            env: self.state.env.clone(),
            cwd: self.state.cwd.clone(),
            elapsed: 0.0,
        };
        let mut result = ExecResult {
            command: command.to_string(),
            stdout: String::new(),
            stderr: String::new(),
            exit_code: 0,
            duration: 0.0,
            timed_out: false,
        };
        let trimmed = command.trim();

        if let Some(i) = self.find_rule(trimmed, &run) {
            let rule = self.rules[i].rule.clone();
            if rule.duration > timeout {
                result.exit_code = TIMEOUT_EXIT_CODE;
                result.timed_out = true;
                result.duration = timeout;
                return result;
            }
            match self.apply_effects(&rule.effects, &mut run) {
                Ok(()) => {
                    result.stdout = rule.stdout;
                    result.stderr = rule.stderr;
                    result.exit_code = rule.exit_code;
                }
                Err(e) => {
                    result.stderr = format!("{e}\n");
                    result.exit_code = 1;
                }
            }
            result.duration = rule.duration;
            return result;
        }

        let mut last = 0;
        let mut pipe_buf = String::new();
        let segments = shell::parse(trimmed);
        for (i, seg) in segments.iter().enumerate() {
            let skip = match seg.joiner {
                Some(Joiner::And) => last != 0,
                Some(Joiner::Or) => last == 0,
                _ => false,
            };
            if skip {
                continue;
            }
            let piped_in = matches!(seg.joiner, Some(Joiner::Pipe));
            let stdin = if piped_in { std::mem::take(&mut pipe_buf) } else { String::new() };
            let piped_out = matches!(segments.get(i + 1).and_then(|s| s.joiner), Some(Joiner::Pipe));
            match self.run_segment(seg, &stdin, &mut run, timeout) {
                Ok(out) => {
                    if piped_out {
                        pipe_buf = out.stdout;
                    } else {
                        result.stdout.push_str(&out.stdout);
                    }
                    result.stderr.push_str(&out.stderr);
                    last = out.code;
                }
                Err(out) => {
                    result.stderr.push_str(&out.stderr);
                    result.exit_code = out.code;
                    result.timed_out = true;
                    result.duration = timeout;
                    return result;
                }
            }
            if seg.words.first().map(String::as_str) == Some("exit") {
                break;
            }
        }
        result.exit_code = last;
        result.duration = run.elapsed;
        result
    }
}

impl SandboxBackend for Simulator {
    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        self.history.push(command.to_string());
        Ok(self.run_command(command, timeout.as_secs_f64()))
    }

    fn set_env(&mut self, key: &str, value: &str) -> Result<(), SandboxError> {
        self.state.env.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn set_workdir(&mut self, dir: &str) -> Result<(), SandboxError> {
        let p = shell::resolve_path(&self.state.cwd, dir);
        self.state.dirs.insert(p.clone());
        self.state.cwd = p;
        Ok(())
    }

    fn capture(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        if self.snapshots.contains_key(snapshot_id) {
            return Err(SandboxError::SnapshotFailure(format!("duplicate snapshot id {snapshot_id}")));
        }
        self.snapshots.insert(snapshot_id.to_string(), self.state.clone());
        Ok(())
    }

    fn restore(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        match self.snapshots.get(snapshot_id) {
            Some(s) => {
                self.state = s.clone();
                Ok(())
            }
            None => Err(SandboxError::SnapshotFailure(format!("unknown snapshot {snapshot_id}"))),
        }
    }

    fn discard(&mut self, snapshot_id: &str) -> Result<(), SandboxError> {
        self.snapshots.remove(snapshot_id);
        Ok(())
    }

    fn commit(&mut self, tag: &str) -> Result<String, SandboxError> {
        let image = format!("sim:{tag}");
        self.registry.lock().unwrap().insert(
            image.clone(),
            Image {
                state: self.state.clone(),
                rules: self.rules.clone(),
            },
        );
        Ok(image)
    }

    fn set_write_guard(&mut self, enabled: bool) {
        self.write_guard = enabled;
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Hands out simulators sharing one fixture and one image registry.
#[derive(Clone)]
pub struct SimProvider {
    rules: Rules,
    initial: SimState,
    registry: Registry,
}

impl SimProvider {
    pub fn new(fixture: SimFixture) -> Result<Self, SandboxError> {
        Ok(Self {
            rules: compile_rules(&fixture.rules)?,
            initial: fixture.initial,
            registry: Arc::default(),
        })
    }

    /// State of a committed image, if present.
    pub fn image_state(&self, image: &str) -> Option<SimState> {
        self.registry.lock().unwrap().get(image).map(|i| i.state.clone())
    }
}

impl SandboxProvider for SimProvider {
    fn provision(&self, base_image: &str, _run_id: &str) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        let existing = self.registry.lock().unwrap().get(base_image).cloned();
        let (rules, state) = match existing {
            Some(img) => (img.rules, img.state),
            None => (self.rules.clone(), self.initial.clone()),
        };
        Ok(Box::new(Simulator::from_parts(rules, state, self.registry.clone())))
    }

    fn open(&self, image: &str, _session: &str) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        let img = self
            .registry
            .lock()
            .unwrap()
            .get(image)
            .cloned()
            .ok_or_else(|| SandboxError::Backend(format!("no such image {image}")))?;
        Ok(Box::new(Simulator::from_parts(img.rules, img.state, self.registry.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const T: Duration = Duration::from_secs(600);

    fn sim(v: serde_json::Value) -> Simulator {
        Simulator::new(serde_json::from_value(v).unwrap())
    }

    #[test]
    fn rules_take_precedence_and_respect_conditions() {
        let mut s = sim(json!({
            "rules": [
                {"pattern": "^pytest", "when": {"file_exists": ["/venv"]}, "stdout": "3 passed"},
                {"pattern": "^pytest", "exit_code": 1, "stderr": "E   ImportError"}
            ]
        }));
        assert_eq!(s.exec("pytest -q", T).unwrap().exit_code, 1);
        s.exec("mkdir /venv", T).unwrap();
        assert_eq!(s.exec("pytest -q", T).unwrap().stdout, "3 passed");
    }

    #[test]
    fn chains_and_redirects() {
        let mut s = sim(json!({}));
        let r = s.exec("mkdir -p /w && cd /w && echo hi > a.txt && cat a.txt", T).unwrap();
        assert_eq!(r.stdout, "hi\n");
        assert_eq!(s.state().files["/w/a.txt"], "hi\n");
        // cd is local to one command
        assert_eq!(s.state().cwd, "/");
        let r = s.exec("false && echo no || echo yes", T).unwrap();
        assert_eq!(r.stdout, "yes\n");
        let r = s.exec("cat /nope 2>&1", T).unwrap();
        assert!(r.stdout.contains("No such file"));
        assert_eq!(r.exit_code, 1);
        let r = s.exec("echo x >> /w/a.txt; cat /w/a.txt | grep x", T).unwrap();
        assert_eq!(r.stdout, "x\n");
        assert_eq!(s.exec("nosuchtool --flag", T).unwrap().exit_code, NOT_FOUND_EXIT_CODE);
    }

    #[test]
    fn segment_rules_inside_chains() {
        let mut s = sim(json!({
            "rules": [{"pattern": "^pip install pyyaml$", "stdout": "Successfully installed pyyaml\n",
                       "effects": [{"write": {"path": "/site/yaml", "content": ""}}]}]
        }));
        let r = s.exec("cd / && pip install pyyaml && test -f /site/yaml", T).unwrap();
        assert_eq!(r.exit_code, 0);
        assert!(r.stdout.starts_with("Successfully"));
    }

    #[test]
    fn effects_on_env_and_cwd_persist() {
        let mut s = sim(json!({
            "rules": [{"pattern": "^activate$", "effects": [
                {"set_env": {"key": "VIRTUAL_ENV", "value": "/venv"}},
                {"chdir": {"path": "/workspace"}}
            ]}]
        }));
        s.exec("activate", T).unwrap();
        assert_eq!(s.state().env["VIRTUAL_ENV"], "/venv");
        assert_eq!(s.state().cwd, "/workspace");
        assert_eq!(s.exec("echo ${VIRTUAL_ENV}", T).unwrap().stdout, "/venv\n");
    }

    #[test]
    fn virtual_time_and_timeouts() {
        let mut s = sim(json!({"rules": [{"pattern": "^build$", "duration": 10.0, "effects": [{"write": {"path": "/b", "content": ""}}]}]}));
        let r = s.exec("build", T).unwrap();
        assert_eq!(r.duration, 10.0);
        let r = s.exec("touch /a && sleep 5 && touch /c", Duration::from_secs(3)).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, TIMEOUT_EXIT_CODE);
        // partial mutation before the timeout is kept
        assert!(s.state().files.contains_key("/a"));
        assert!(!s.state().files.contains_key("/c"));
    }

    #[test]
    fn write_guard_blocks_outside_scratch() {
        let mut s = sim(json!({"rules": [{"pattern": "^pip install", "effects": [{"write": {"path": "/site/x", "content": ""}}]}]}));
        s.set_write_guard(true);
        let before = s.state().clone();
        assert_ne!(s.exec("pip install x", T).unwrap().exit_code, 0);
        assert_ne!(s.exec("echo hi > /repo/x", T).unwrap().exit_code, 0);
        assert_ne!(s.exec("touch /repo/y", T).unwrap().exit_code, 0);
        assert_eq!(s.exec("echo hi > /tmp/smoke.py", T).unwrap().exit_code, 0);
        assert_eq!(s.state().outside_scratch(), before.outside_scratch());
        assert_eq!(s.state().files["/tmp/smoke.py"], "hi\n");
    }

    #[test]
    fn snapshots_are_independent_copies() {
        let mut s = sim(json!({}));
        s.exec("touch /a", T).unwrap();
        s.capture("x").unwrap();
        s.exec("rm /a", T).unwrap();
        s.exec("touch /b", T).unwrap();
        s.restore("x").unwrap();
        assert!(s.state().files.contains_key("/a"));
        assert!(!s.state().files.contains_key("/b"));
        assert!(s.capture("x").is_err());
        s.discard("x").unwrap();
        assert!(s.restore("x").is_err());
    }

    #[test]
    fn provider_commit_and_open() {
        let p = SimProvider::new(SimFixture::default()).unwrap();
        let mut a = p.provision("base", "run").unwrap();
        a.exec("touch /done", T).unwrap();
        let image = a.commit("run-1").unwrap();
        let mut b = p.open(&image, "judge").unwrap();
        assert_eq!(b.exec("test -f /done", T).unwrap().exit_code, 0);
        b.exec("rm /done", T).unwrap();
        assert!(p.image_state(&image).unwrap().files.contains_key("/done"));
        assert!(p.open("missing", "x").is_err());
    }

    #[test]
    fn bad_pattern_is_rejected() {
        let f: SimFixture = serde_json::from_value(json!({"rules": [{"pattern": "("}]})).unwrap();
        assert!(Simulator::try_new(f).is_err());
    }
}
