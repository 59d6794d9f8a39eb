mod common;

use std::sync::Arc;

use setupx_core::adjudication::{Decision, FailureCategory, Ruling};
use setupx_core::gateway::Role;
use setupx_core::orchestrator::RunRecord;
use setupx_core::sandbox::TrialStatus;
use setupx_core::trajectory::{Action, Observation, Outcome};
use setupx_core::verifier::VerifierOutcome;
use setupx_core::xpu::XpuId;

use common::*;

#[test]
fn lock_conflict_run_passes() {
    let out = tempfile::tempdir().unwrap();
    let store = kb();
    let h = harness(out.path(), sandbox_fixture(), Arc::new(chat("chat.json")), Some(store.clone()));
    let art = h.run_with_id(&lock_task(), "lockdemo");
    let run = art.run.as_ref().unwrap();
    let t = &run.trajectory;
    assert_eq!(t.outcome, Outcome::Finished, "{:#?}", run.events);

    let kinds: Vec<&str> = t.steps.iter().map(|s| s.action.kind()).collect();
    assert_eq!(kinds, ["SHELL_COMMAND", "SHELL_COMMAND", "TRY_XPU_SUGGESTION", "VERIFY", "FINISH"]);
    match &t.steps[2].observation {
        Observation::Trial { outcome, probe, .. } => {
            assert_eq!(outcome.status, TrialStatus::Success);
            assert!(probe.is_some());
            assert_eq!(outcome.depth, 1);
        }
        o => panic!("{o:?}"),
    }
    assert_eq!(t.last_verify(), Some(VerifierOutcome::Pass));

    assert_eq!(run.rounds.len(), 1);
    let r = &run.rounds[0].result;
    assert_eq!(r.anchor.recommended_ids, vec![XpuId::new("xpu_poetry_lock_conflict")]);
    assert_eq!(r.dropped_ids, vec!["xpu_not_in_candidates".to_string()]);
    assert_eq!(t.anchors.len(), 1);
    let tel = store.telemetry(&XpuId::new("xpu_poetry_lock_conflict")).unwrap();
    assert_eq!((tel.hits, tel.successes, tel.failures), (64, 38, 15));
    assert!(run.events.iter().any(|e| e.contains("closing audit")));

    let adj = art.adjudication.as_ref().unwrap();
    assert!(adj.charges.is_empty());
    assert_eq!(adj.decision, Decision::NotGuilty);
    assert!(art.record.pass);
    assert_eq!(art.record.failure, None);

    let gw = art.gateway.as_ref().unwrap();
    assert_eq!(gw.calls_for(Role::Judge), 0);
    for f in ["trajectory.jsonl", "adjudication.json", "record.json", "chat_log.jsonl"] {
        assert!(out.path().join("lockdemo").join(f).is_file(), "{f}");
    }
    let stored = RunRecord::load(&out.path().join("lockdemo/record.json")).unwrap();
    assert_eq!(stored.recompute_pass().unwrap(), stored.pass);
}

#[test]
fn missing_project_install_is_convicted() {
    let out = tempfile::tempdir().unwrap();
    let h = harness(out.path(), mutated_fixture(), Arc::new(chat("chat_mutated.json")), Some(kb()));
    let art = h.run_with_id(&lock_task(), "lockdemo-mutated");
    let run = art.run.as_ref().unwrap();
    let t = &run.trajectory;
    assert_eq!(t.outcome, Outcome::Finished, "{:#?}", run.events);

    let verify = t
        .steps
        .iter()
        .find_map(|s| match &s.observation {
            Observation::Verify { report } => Some(report),
            _ => None,
        })
        .unwrap();
    assert_eq!(verify.outcome, VerifierOutcome::Pass);
    assert_eq!(verify.blocked.len(), 1);
    assert!(verify.notes.contains("blocked: pip install -e ."), "{}", verify.notes);

    let adj = art.adjudication.as_ref().unwrap();
    assert_eq!(adj.charges.len(), 1);
    let c = &adj.charges[0];
    assert_eq!(c.category, FailureCategory::C3);
    assert!(c.evidence[0].output.contains("No module named 'lockdemo'"), "{:?}", c.evidence);
    assert_eq!(adj.rulings[0].ruling, Ruling::Upheld);
    assert!(adj.rulings[0].outputs[0].output.starts_with("exit 1"));
    assert_eq!(adj.decision, Decision::Guilty);
    assert!(!art.record.pass);
    assert_eq!(art.record.failure.as_deref(), Some("guilty"));
    assert_eq!(art.record.categories, vec![FailureCategory::C3]);
    assert!(matches!(t.steps[1].action, Action::ShellCommand { .. }));
}
