//! Checkpointed execution environments.
//!
//! [`Sandbox`] owns a backend plus the LIFO snapshot stack and implements the
//! speculative trial and multi-frame rollback on top of three backend
//! primitives: capture, restore and discard. Two backends exist: the
//! deterministic [`Simulator`] and the container-engine [`DockerSandbox`].

mod docker;
mod simulator;

use std::any::Any;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use docker::{DockerConfig, DockerProvider, DockerSandbox};
pub use simulator::{Condition, Effect, SimFixture, SimProvider, SimRule, SimState, Simulator};

/// Exit code recorded when a command exceeds its timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;
/// Exit code for commands the simulator does not know.
pub const NOT_FOUND_EXIT_CODE: i32 = 127;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("sandbox is not running: {0}")]
    SandboxDead(String),
    #[error("invalid environment variable name `{0}`")]
    InvalidKey(String),
    #[error("snapshot failure: {0}")]
    SnapshotFailure(String),
    #[error("cannot roll back {requested} frame(s): stack depth is {depth}")]
    StackUnderflow { requested: usize, depth: usize },
    #[error("rollback needs at least one frame")]
    ZeroFrames,
    #[error("trial needs at least one command")]
    EmptyTrial,
    #[error("backend error: {0}")]
    Backend(String),
}

/// Captured result of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub command: String,
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    /// Seconds; virtual on the simulator.
    pub duration: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timed_out: bool,
}

impl ExecResult {
    pub fn ok(&self) -> bool {
        self.exit_code == 0
    }

    pub fn combined_output(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => format!("{}\n{}", self.stdout, self.stderr),
        }
    }

    /// Bounded rendering for prompts and evidence.
    pub fn excerpt(&self, max: usize) -> String {
        let body = crate::text::truncate_middle(&self.combined_output(), max);
        let status = if self.timed_out {
            format!("exit code {} (timed out)", self.exit_code)
        } else {
            format!("exit code {}", self.exit_code)
        };
        if body.is_empty() {
            status
        } else {
            format!("{status}\n{body}")
        }
    }

    /// Non-zero exit, or output that matches the error-line patterns.
    pub fn signals_failure(&self) -> bool {
        !self.ok() || !crate::text::error_lines(&self.combined_output()).is_empty()
    }
}

/// One frame of the snapshot stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub created_at_step: usize,
    pub label: String,
}

/// Re-runnable check for whether an error is still present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorProbe {
    pub command: String,
    /// Regex over the probe's combined output.
    pub signature: String,
}

impl ErrorProbe {
    /// Builds a probe from a failing result: the first error line (or last
    /// non-empty stderr line) becomes a literal signature.
    pub fn from_failure(result: &ExecResult) -> Option<ErrorProbe> {
        if result.command.trim().is_empty() {
            return None;
        }
        let output = result.combined_output();
        let line = crate::text::error_lines(&output)
            .into_iter()
            .next()
            .or_else(|| result.stderr.lines().rev().find(|l| !l.trim().is_empty()))?;
        Some(ErrorProbe {
            command: result.command.clone(),
            signature: regex::escape(line.trim()),
        })
    }

    pub fn matches(&self, result: &ExecResult) -> bool {
        let out = result.combined_output();
        match Regex::new(&self.signature) {
            Ok(re) => re.is_match(&out),
            Err(_) => out.contains(&self.signature),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub status: TrialStatus,
    pub per_command: Vec<ExecResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ExecResult>,
    /// Stack depth after the trial.
    pub depth: usize,
}

/// Primitive operations a concrete environment provides.
pub trait SandboxBackend: Send {
    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError>;
    fn set_env(&mut self, key: &str, value: &str) -> Result<(), SandboxError>;
    fn set_workdir(&mut self, dir: &str) -> Result<(), SandboxError>;
    /// Captures filesystem and environment under `snapshot_id`.
    fn capture(&mut self, snapshot_id: &str) -> Result<(), SandboxError>;
    fn restore(&mut self, snapshot_id: &str) -> Result<(), SandboxError>;
    fn discard(&mut self, snapshot_id: &str) -> Result<(), SandboxError>;
    /// Persists the current state as an image others can open.
    fn commit(&mut self, tag: &str) -> Result<String, SandboxError>;
    /// Semantic write protection outside `/tmp`, where the backend supports it.
    fn set_write_guard(&mut self, _enabled: bool) {}
    fn as_any(&self) -> &dyn Any;
}

/// Creates sandboxes from base images or committed images.
pub trait SandboxProvider: Send + Sync {
    fn provision(&self, base_image: &str, run_id: &str) -> Result<Box<dyn SandboxBackend>, SandboxError>;
    fn open(&self, image: &str, session: &str) -> Result<Box<dyn SandboxBackend>, SandboxError>;
}

/// A backend plus its LIFO snapshot stack.
pub struct Sandbox {
    backend: Box<dyn SandboxBackend>,
    stack: Vec<Snapshot>,
    step: usize,
    next_snapshot: u64,
    prefix: String,
    default_timeout: Duration,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("stack", &self.stack)
            .field("step", &self.step)
            .finish()
    }
}

pub fn valid_env_key(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Sandbox {
    pub fn new(backend: Box<dyn SandboxBackend>) -> Self {
        Self::with_prefix(backend, "snap")
    }

    pub fn with_prefix(backend: Box<dyn SandboxBackend>, prefix: &str) -> Self {
        Self {
            backend,
            stack: Vec::new(),
            step: 0,
            next_snapshot: 0,
            prefix: prefix.to_string(),
            default_timeout: Duration::from_secs(900),
        }
    }

    pub fn default_timeout(&self) -> Duration {
        self.default_timeout
    }

    pub fn set_default_timeout(&mut self, t: Duration) {
        self.default_timeout = t;
    }

    /// Trajectory index recorded on snapshots taken from now on.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn stack(&self) -> &[Snapshot] {
        &self.stack
    }

    pub fn backend(&self) -> &dyn SandboxBackend {
        self.backend.as_ref()
    }

    pub fn backend_mut(&mut self) -> &mut dyn SandboxBackend {
        self.backend.as_mut()
    }

    /// Downcasts the backend, e.g. to inspect simulator state in tests.
    pub fn backend_as<T: 'static>(&self) -> Option<&T> {
        self.backend.as_any().downcast_ref::<T>()
    }

    pub fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        self.backend.exec(command, timeout)
    }

    pub fn set_env(&mut self, key: &str, value: &str) -> Result<(), SandboxError> {
        if !valid_env_key(key) {
            return Err(SandboxError::InvalidKey(key.to_string()));
        }
        self.backend.set_env(key, value)
    }

    pub fn set_workdir(&mut self, dir: &str) -> Result<(), SandboxError> {
        self.backend.set_workdir(dir)
    }

    pub fn push_checkpoint(&mut self, label: &str) -> Result<usize, SandboxError> {
        self.next_snapshot += 1;
        let snapshot_id = format!("{}-{:04}", self.prefix, self.next_snapshot);
        self.backend.capture(&snapshot_id)?;
        self.stack.push(Snapshot {
            snapshot_id,
            created_at_step: self.step,
            label: label.to_string(),
        });
        Ok(self.stack.len())
    }

    /// Pops `n_frames` and restores the deepest popped frame.
    pub fn rollback(&mut self, n_frames: usize) -> Result<Snapshot, SandboxError> {
        if n_frames == 0 {
            return Err(SandboxError::ZeroFrames);
        }
        if n_frames > self.stack.len() {
            return Err(SandboxError::StackUnderflow {
                requested: n_frames,
                depth: self.stack.len(),
            });
        }
        let cut = self.stack.len() - n_frames;
        let target = self.stack[cut].clone();
        self.backend.restore(&target.snapshot_id)?;
        let popped: Vec<Snapshot> = self.stack.drain(cut..).collect();
        for frame in popped {
            if let Err(e) = self.backend.discard(&frame.snapshot_id) {
                tracing::warn!(snapshot = %frame.snapshot_id, error = %e, "failed to discard snapshot");
            }
        }
        Ok(target)
    }

    /// Speculatively runs `commands` behind a fresh checkpoint.
    ///
    /// Commands run in order and stop at the first non-zero exit. The trial
    /// succeeds when every command exits 0 and, if a probe is given, the probe
    /// output no longer matches its signature. Success keeps the new state and
    /// leaves the checkpoint on the stack; failure pops it and restores the
    /// pre-trial state.
    pub fn trial(
        &mut self,
        commands: &[String],
        probe: Option<&ErrorProbe>,
        timeout: Duration,
    ) -> Result<TrialOutcome, SandboxError> {
        if commands.is_empty() {
            return Err(SandboxError::EmptyTrial);
        }
        self.push_checkpoint("trial")?;
        let mut per_command = Vec::new();
        let mut all_ok = true;
        for cmd in commands {
            let result = match self.backend.exec(cmd, timeout) {
                Ok(r) => r,
                Err(e) => {
                    self.rollback(1)?;
                    return Err(e);
                }
            };
            let ok = result.ok();
            per_command.push(result);
            if !ok {
                all_ok = false;
                break;
            }
        }
        let mut probe_result = None;
        if all_ok {
            if let Some(p) = probe {
                let r = self.backend.exec(&p.command, timeout)?;
                if p.matches(&r) {
                    all_ok = false;
                }
                probe_result = Some(r);
            }
        }
        let status = if all_ok {
            TrialStatus::Success
        } else {
            self.rollback(1)?;
            TrialStatus::Failure
        };
        Ok(TrialOutcome {
            status,
            per_command,
            probe: probe_result,
            depth: self.stack.len(),
        })
    }

    pub fn commit(&mut self, tag: &str) -> Result<String, SandboxError> {
        self.backend.commit(tag)
    }
}
