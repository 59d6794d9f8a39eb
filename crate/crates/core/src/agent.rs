//! The setup agent's observe, retrieve, think, act loop.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::gateway::{Llm, Message, Role};
use crate::prompts::{PromptKind, Prompts};
use crate::retriever::{RetrievalResult, RetrievalRound, Retriever};
use crate::sandbox::{ErrorProbe, ExecResult, Sandbox, TrialStatus};
use crate::text;
use crate::trajectory::{parse_action, Action, Budgets, Observation, Outcome, RepoTask, Step, Trajectory};
use crate::verifier::{Verifier, VerifierConfig};
use crate::xpu::{assign_tier, XpuId};

pub const FINISH_REJECTED: &str = "FINISH rejected: VERIFY required";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub budgets: Budgets,
    /// Steps shown to the model.
    pub window: usize,
    /// Per-observation cap in the prompt, chars.
    pub output_chars: usize,
    pub reparse_retries: usize,
    pub verifier: VerifierConfig,
    /// Variables for atom rendering.
    pub render_ctx: BTreeMap<String, String>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            budgets: Budgets::default(),
            window: 8,
            output_chars: 2000,
            reparse_retries: 2,
            verifier: VerifierConfig::default(),
            render_ctx: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub trajectory: Trajectory,
    pub rounds: Vec<RetrievalRound>,
    pub events: Vec<String>,
}

pub struct SetupAgent<'a> {
    llm: &'a Llm,
    prompts: &'a Prompts,
    retriever: Option<&'a mut Retriever>,
    cfg: AgentConfig,
}

/// Latest command result carried by an observation, if any.
fn last_result(obs: &Observation) -> Option<&ExecResult> {
    match obs {
        Observation::Trial { outcome, .. } => outcome.probe.as_ref().or(outcome.per_command.last()),
        _ => obs.exec_results().last().copied(),
    }
}

fn finish_allowed(steps: &[Step]) -> bool {
    steps
        .iter()
        .rev()
        .find_map(|s| match &s.observation {
            Observation::Verify { report } => Some(report.outcome.permits_finish()),
            _ => None,
        })
        .unwrap_or(false)
}

impl<'a> SetupAgent<'a> {
    /// `retriever` is `None` when experience retrieval is disabled.
    pub fn new(llm: &'a Llm, prompts: &'a Prompts, retriever: Option<&'a mut Retriever>, cfg: AgentConfig) -> Self {
        Self {
            llm,
            prompts,
            retriever,
            cfg,
        }
    }

    fn system_prompt(&self, task: &RepoTask) -> String {
        let targets = if task.execution_targets.is_empty() {
            "the project's own test suite".to_string()
        } else {
            task.execution_targets.join("; ")
        };
        self.prompts.render(
            PromptKind::Setup,
            &[
                ("repo", &task.source),
                ("revision", &task.revision),
                ("workdir", &task.workdir),
                ("targets", &targets),
            ],
        )
    }

    fn user_prompt(&self, steps: &[Step], retrieval: Option<&RetrievalResult>) -> String {
        let start = steps.len().saturating_sub(self.cfg.window);
        let history: Vec<String> = steps[start..].iter().map(|s| s.render(self.cfg.output_chars)).collect();
        let mut out = format!("Recent steps:\n{}\n", history.join("\n\n"));
        if let Some(r) = retrieval.filter(|r| !r.xpus.is_empty()) {
            out.push_str("\nExperience suggestions for the latest failure (apply with TRY_XPU_SUGGESTION):\n");
            for x in &r.xpus {
                let tier = self
                    .retriever
                    .as_ref()
                    .map(|rt| assign_tier(&x.telemetry, &rt.config().thresholds).to_string())
                    .unwrap_or_else(|| "untiered".into());
                out.push_str(&format!(
                    "- id {} [{tier}; hits {}, successes {}, failures {}]\n",
                    x.id, x.telemetry.hits, x.telemetry.successes, x.telemetry.failures
                ));
                for a in &x.advice_nl {
                    out.push_str(&format!("  advice: {a}\n"));
                }
                if let Ok(cmds) = x.render_atoms(&self.cfg.render_ctx) {
                    for c in cmds {
                        out.push_str(&format!("  atom: {c}\n"));
                    }
                }
            }
        }
        out.push_str("\nReply with the next action as JSON.");
        out
    }

    fn think(&self, system: &str, user: String) -> Result<(String, Action, Vec<String>), String> {
        let mut messages = vec![Message::system(system), Message::user(user)];
        let mut rejected = Vec::new();
        for _ in 0..=self.cfg.reparse_retries {
            let reply = self.llm.chat(Role::Setup, &messages).map_err(|e| e.to_string())?;
            match parse_action(&reply) {
                Ok((thought, action)) => return Ok((thought, action, rejected)),
                Err(e) => {
                    messages.push(Message::assistant(reply.clone()));
                    messages.push(Message::user(format!("{e}. Reply again with one JSON action.")));
                    rejected.push(format!("{}: {}", e.0, text::truncate_head(&reply, 300)));
                }
            }
        }
        Err(format!("no valid action after {} attempts: {}", self.cfg.reparse_retries + 1, rejected.join(" | ")))
    }

    fn lookup_xpu(&self, id: &str, retrieval: Option<&RetrievalResult>) -> Option<crate::xpu::Xpu> {
        retrieval
            .and_then(|r| r.xpus.iter().find(|x| x.id.as_str() == id).cloned())
            .or_else(|| {
                self.retriever
                    .as_ref()
                    .and_then(|rt| rt.store().get(&XpuId::new(id)))
                    .map(|e| e.xpu)
            })
    }

    fn dispatch(
        &self,
        action: &Action,
        sandbox: &mut Sandbox,
        steps: &[Step],
        retrieval: Option<&RetrievalResult>,
        probe: Option<&ErrorProbe>,
        timeout: Duration,
    ) -> Observation {
        let err = |message: String| Observation::Error { message };
        match action {
            Action::ShellCommand { command } => match sandbox.exec(command, timeout) {
                Ok(result) => Observation::Exec { result },
                Err(e) => err(e.to_string()),
            },
            Action::SetEnv { env_key, env_value } => match sandbox.set_env(env_key, env_value) {
                Ok(()) => Observation::EnvSet {
                    key: env_key.clone(),
                    value: env_value.clone(),
                },
                Err(e) => err(e.to_string()),
            },
            Action::RollbackEnv { n_frames } => match sandbox.rollback(*n_frames) {
                Ok(restored) => Observation::Rollback {
                    restored,
                    depth: sandbox.depth(),
                },
                Err(e) => err(e.to_string()),
            },
            Action::TryXpuSuggestion {
                xpu_suggestion_id,
                command,
                ..
            } => {
                let Some(xpu) = self.lookup_xpu(xpu_suggestion_id, retrieval) else {
                    return err(format!("unknown XPU id `{xpu_suggestion_id}`"));
                };
                let commands = if command.trim().is_empty() {
                    match xpu.render_atoms(&self.cfg.render_ctx) {
                        Ok(c) if !c.is_empty() => c,
                        Ok(_) => return err(format!("{xpu_suggestion_id} has no atoms; supply a command")),
                        Err(e) => return err(format!("cannot render atoms of {xpu_suggestion_id}: {e}")),
                    }
                } else {
                    vec![command.clone()]
                };
                match sandbox.trial(&commands, probe, timeout) {
                    Ok(outcome) => Observation::Trial {
                        xpu_id: xpu_suggestion_id.clone(),
                        commands,
                        probe: probe.cloned(),
                        outcome,
                    },
                    Err(e) => err(e.to_string()),
                }
            }
            Action::Verify {} => {
                let start = steps.len().saturating_sub(self.cfg.window);
                let report = Verifier::new(self.llm, self.prompts, self.cfg.verifier.clone()).verify(sandbox, &steps[start..]);
                Observation::Verify { report }
            }
            Action::Finish { message } => {
                if finish_allowed(steps) {
                    Observation::Finished {
                        message: message.clone(),
                    }
                } else {
                    Observation::Rejected {
                        message: FINISH_REJECTED.into(),
                    }
                }
            }
        }
    }

    pub fn run(&mut self, task: &RepoTask, sandbox: &mut Sandbox) -> AgentRun {
        let budgets = self.cfg.budgets;
        let started = Instant::now();
        let mut virtual_secs = 0.0f64;
        let elapsed = |v: f64| started.elapsed().as_secs_f64().max(v);
        let command_timeout = |v: f64| {
            let left = (budgets.wall_clock - elapsed(v)).max(0.0);
            Duration::from_secs_f64(budgets.command_timeout.min(left))
        };

        let mut steps: Vec<Step> = Vec::new();
        let mut rounds: Vec<RetrievalRound> = Vec::new();
        let mut anchors = Vec::new();
        let mut events = Vec::new();
        let mut retrieval: Option<RetrievalResult> = None;
        let mut probe: Option<ErrorProbe> = None;

        // step 0: the harness checks the repository out
        let clone = task.clone_command();
        sandbox.set_step(0);
        let obs = match sandbox.exec(&clone, command_timeout(virtual_secs)) {
            Ok(result) => Observation::Exec { result },
            Err(e) => Observation::Error { message: e.to_string() },
        };
        if let Err(e) = sandbox.set_workdir(&task.workdir) {
            events.push(format!("cannot enter {}: {e}", task.workdir));
        }
        steps.push(Step {
            index: 0,
            thought: "harness: check out the repository at the pinned revision".into(),
            action: Action::ShellCommand { command: clone },
            observation: obs,
            rejected_attempts: Vec::new(),
        });

        let system = self.system_prompt(task);
        let mut outcome = Outcome::BudgetExhausted;
        let mut taken = 0;
        // set when the last command ran under a timeout shortened by the wall clock
        let mut capped = false;
        loop {
            let last = steps.last().unwrap();
            virtual_secs += last.observation.exec_results().iter().map(|r| r.duration).sum::<f64>();
            if let Some(r) = last_result(&last.observation).filter(|r| r.signals_failure()).cloned() {
                if !r.ok() {
                    probe = ErrorProbe::from_failure(&r);
                }
                if let Some(rt) = self.retriever.as_deref_mut() {
                    match rt.on_failure(&steps, &r) {
                        Ok(round) => {
                            anchors.push(round.result.anchor.clone());
                            retrieval = Some(round.result.clone());
                            rounds.push(round);
                        }
                        Err(e) => events.push(format!("retrieval failed: {e}")),
                    }
                }
            }
            if matches!(last.observation, Observation::Finished { .. }) {
                outcome = Outcome::Finished;
                break;
            }
            let hit_cap = capped && last.observation.exec_results().iter().any(|r| r.timed_out);
            if hit_cap || elapsed(virtual_secs) >= budgets.wall_clock {
                outcome = Outcome::Timeout;
                break;
            }
            if taken >= budgets.max_steps {
                break;
            }

            let user = self.user_prompt(&steps, retrieval.as_ref());
            let (thought, action, rejected) = match self.think(&system, user) {
                Ok(t) => t,
                Err(e) => {
                    events.push(e);
                    outcome = Outcome::Aborted;
                    break;
                }
            };
            let index = steps.len();
            sandbox.set_step(index);
            let timeout = command_timeout(virtual_secs);
            capped = timeout.as_secs_f64() < budgets.command_timeout;
            let observation = self.dispatch(&action, sandbox, &steps, retrieval.as_ref(), probe.as_ref(), timeout);
            if let Observation::Trial { outcome: t, .. } = &observation {
                if t.status == TrialStatus::Success {
                    probe = None;
                }
            }
            steps.push(Step {
                index,
                thought,
                action,
                observation,
                rejected_attempts: rejected,
            });
            taken += 1;
        }

        if let Some(rt) = self.retriever.as_deref_mut() {
            let verdicts = rt.flush(&steps);
            if !verdicts.is_empty() {
                events.push(format!("closing audit: {} verdict(s)", verdicts.len()));
            }
            events.extend(rt.events().iter().cloned());
        }

        AgentRun {
            trajectory: Trajectory {
                task: task.clone(),
                budgets,
                steps,
                anchors,
                outcome,
                elapsed: elapsed(virtual_secs),
            },
            rounds,
            events,
        }
    }
}

/// Re-applies a trajectory's actions to `sandbox` without any model calls.
///
/// Verifier sessions are replayed from their recorded evidence, so the
/// returned observations can be compared with the recorded ones.
pub fn replay(trajectory: &Trajectory, sandbox: &mut Sandbox) -> Vec<Observation> {
    let budgets = trajectory.budgets;
    let timeout = Duration::from_secs_f64(budgets.command_timeout);
    let mut out: Vec<Observation> = Vec::new();
    for step in &trajectory.steps {
        sandbox.set_step(step.index);
        let obs = match (&step.action, &step.observation) {
            (Action::Verify {}, Observation::Verify { report }) => {
                sandbox.backend_mut().set_write_guard(true);
                for e in report.evidence.iter().filter(|e| e.exit_code.is_some()) {
                    let _ = sandbox.exec(&e.command, timeout);
                }
                sandbox.backend_mut().set_write_guard(false);
                step.observation.clone()
            }
            (Action::TryXpuSuggestion { xpu_suggestion_id, .. }, Observation::Trial { commands, probe, .. }) => {
                match sandbox.trial(commands, probe.as_ref(), timeout) {
                    Ok(outcome) => Observation::Trial {
                        xpu_id: xpu_suggestion_id.clone(),
                        commands: commands.clone(),
                        probe: probe.clone(),
                        outcome,
                    },
                    Err(e) => Observation::Error { message: e.to_string() },
                }
            }
            (Action::TryXpuSuggestion { .. }, recorded) => recorded.clone(),
            (Action::Finish { message }, _) => {
                let verified = out
                    .iter()
                    .rev()
                    .find_map(|o| match o {
                        Observation::Verify { report } => Some(report.outcome.permits_finish()),
                        _ => None,
                    })
                    .unwrap_or(false);
                if verified {
                    Observation::Finished { message: message.clone() }
                } else {
                    Observation::Rejected {
                        message: FINISH_REJECTED.into(),
                    }
                }
            }
            (Action::ShellCommand { command }, _) => match sandbox.exec(command, timeout) {
                Ok(result) => Observation::Exec { result },
                Err(e) => Observation::Error { message: e.to_string() },
            },
            (Action::SetEnv { env_key, env_value }, _) => match sandbox.set_env(env_key, env_value) {
                Ok(()) => Observation::EnvSet {
                    key: env_key.clone(),
                    value: env_value.clone(),
                },
                Err(e) => Observation::Error { message: e.to_string() },
            },
            (Action::RollbackEnv { n_frames }, _) => match sandbox.rollback(*n_frames) {
                Ok(restored) => Observation::Rollback {
                    restored,
                    depth: sandbox.depth(),
                },
                Err(e) => Observation::Error { message: e.to_string() },
            },
            (Action::Verify {}, recorded) => recorded.clone(),
        };
        if step.index == 0 {
            let _ = sandbox.set_workdir(&trajectory.task.workdir);
        }
        out.push(obs);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, HashEmbedder, ScriptedChat};
    use crate::sandbox::{SimFixture, Simulator};
    use serde_json::json;
    use std::sync::Arc;

    fn fixture() -> SimFixture {
        serde_json::from_value(json!({
            "rules": [
                {"pattern": "^git clone", "effects": [{"write": {"path": "/workspace/repo/setup.py", "content": ""}}]},
                {"pattern": "^pytest", "stdout": "3 passed"}
            ]
        }))
        .unwrap()
    }

    fn setup(chat: ScriptedChat) -> (Llm, Prompts) {
        let gw = Arc::new(Gateway::new(Arc::new(chat), Arc::new(HashEmbedder::new(8, 0))));
        (Llm::new(gw, "a"), Prompts::default())
    }

    fn act(kind: &str, content: serde_json::Value) -> serde_json::Value {
        json!({"thought": "t", "action_type": kind, "content": content})
    }

    fn task() -> RepoTask {
        RepoTask::new("demo", "https://example.com/demo.git", "abc")
    }

    #[test]
    fn finish_requires_verify() {
        let chat = ScriptedChat::new();
        chat.push_json(Role::Setup, &act("FINISH", json!({"message": "done"})));
        chat.push_json(Role::Setup, &act("VERIFY", json!({})));
        chat.push_json(Role::Verifier, &json!({"phase": "run_tests", "command": "pytest"}));
        chat.push_json(Role::Verifier, &json!({"phase": "report", "outcome": "pass"}));
        chat.push_json(Role::Setup, &act("FINISH", json!({"message": "done"})));
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        let run = SetupAgent::new(&llm, &prompts, None, AgentConfig::default()).run(&task(), &mut sb);
        let t = &run.trajectory;
        assert_eq!(t.outcome, Outcome::Finished);
        assert_eq!(t.steps.len(), 4);
        assert_eq!(
            t.steps[1].observation,
            Observation::Rejected {
                message: FINISH_REJECTED.into()
            }
        );
        t.check().unwrap();
    }

    #[test]
    fn malformed_replies_are_retried_then_abort() {
        let chat = ScriptedChat::new();
        chat.push(Role::Setup, "not json");
        chat.push_json(Role::Setup, &act("SHELL_COMMAND", json!({"command": "pytest"})));
        for _ in 0..3 {
            chat.push(Role::Setup, r#"{"action_type": "REBOOT"}"#);
        }
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        let run = SetupAgent::new(&llm, &prompts, None, AgentConfig::default()).run(&task(), &mut sb);
        assert_eq!(run.trajectory.outcome, Outcome::Aborted);
        assert_eq!(run.trajectory.steps.len(), 2);
        assert_eq!(run.trajectory.steps[1].rejected_attempts.len(), 1);
    }

    #[test]
    fn max_steps_and_wall_clock() {
        let chat = ScriptedChat::new();
        chat.push_json(Role::Setup, &act("SHELL_COMMAND", json!({"command": "ls"})));
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        let mut cfg = AgentConfig::default();
        cfg.budgets.max_steps = 1;
        let run = SetupAgent::new(&llm, &prompts, None, cfg.clone()).run(&task(), &mut sb);
        assert_eq!(run.trajectory.outcome, Outcome::BudgetExhausted);
        assert_eq!(run.trajectory.steps.len(), 2);

        let chat = ScriptedChat::new();
        chat.push_json(Role::Setup, &act("SHELL_COMMAND", json!({"command": "sleep 5"})));
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        cfg.budgets.max_steps = 60;
        cfg.budgets.wall_clock = 0.1;
        let run = SetupAgent::new(&llm, &prompts, None, cfg).run(&task(), &mut sb);
        assert_eq!(run.trajectory.outcome, Outcome::Timeout);
        match &run.trajectory.steps[1].observation {
            Observation::Exec { result } => assert!(result.timed_out),
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn rollback_and_env_actions() {
        let chat = ScriptedChat::new();
        chat.push_json(Role::Setup, &act("ROLLBACK_ENV", json!({"n_frames": 2})));
        chat.push_json(Role::Setup, &act("SET_ENV", json!({"env_key": "A=B", "env_value": "x"})));
        chat.push_json(Role::Setup, &act("SET_ENV", json!({"env_key": "A", "env_value": "x"})));
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        let mut cfg = AgentConfig::default();
        cfg.budgets.max_steps = 3;
        let run = SetupAgent::new(&llm, &prompts, None, cfg).run(&task(), &mut sb);
        let s = &run.trajectory.steps;
        assert!(matches!(&s[1].observation, Observation::Error { message } if message.contains("depth is 0")));
        assert!(matches!(&s[2].observation, Observation::Error { .. }));
        assert!(matches!(&s[3].observation, Observation::EnvSet { .. }));
    }

    #[test]
    fn replay_reproduces_observations() {
        let chat = ScriptedChat::new();
        chat.push_json(Role::Setup, &act("SHELL_COMMAND", json!({"command": "mkdir -p build && echo x > build/a"})));
        chat.push_json(Role::Setup, &act("SET_ENV", json!({"env_key": "A", "env_value": "1"})));
        chat.push_json(Role::Setup, &act("VERIFY", json!({})));
        chat.push_json(Role::Verifier, &json!({"phase": "run_tests", "command": "echo ok > /tmp/v && pytest"}));
        chat.push_json(Role::Verifier, &json!({"phase": "report", "outcome": "pass"}));
        chat.push_json(Role::Setup, &act("FINISH", json!({"message": "done"})));
        let (llm, prompts) = setup(chat);
        let mut sb = Sandbox::new(Box::new(Simulator::new(fixture())));
        let run = SetupAgent::new(&llm, &prompts, None, AgentConfig::default()).run(&task(), &mut sb);
        let recorded: Vec<Observation> = run.trajectory.steps.iter().map(|s| s.observation.clone()).collect();
        let mut fresh = Sandbox::new(Box::new(Simulator::new(fixture())));
        assert_eq!(replay(&run.trajectory, &mut fresh), recorded);
        assert_eq!(
            fresh.backend_as::<Simulator>().unwrap().state(),
            sb.backend_as::<Simulator>().unwrap().state()
        );
    }
}
