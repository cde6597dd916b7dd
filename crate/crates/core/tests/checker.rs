use std::collections::BTreeMap;

use vpc_core::harness::check::*;
use vpc_core::harness::*;
use vpc_core::hash::Digest256;
use vpc_core::model::{Epoch, NodeId, NodeRole, TimingBudget};
use vpc_core::note::Note;
use vpc_core::simnet::{events_digest, EventKind, SimEvent};
use vpc_core::wire::Membership;

const DEP: &str = "d";

fn cfg() -> CheckConfig {
    CheckConfig {
        sync_period: 10_000,
        miss_threshold: 3,
        timing: TimingBudget::default(),
        discovery_period: 10_000,
        redundancy_target: 1,
        expected_digest: None,
    }
}

fn emit(time: u64, node: u64, note: Note) -> SimEvent<Note> {
    SimEvent { time, kind: EventKind::Emit { node: NodeId(node), note } }
}

fn role(time: u64, node: u64, to: NodeRole, epoch: u64) -> SimEvent<Note> {
    emit(time, node, Note::RoleChanged { deployment: DEP.into(), from: NodeRole::IdleResource, to, epoch: Epoch(epoch), handover: false })
}

fn emitted(time: u64, node: u64, epoch: u64, seq: u64) -> SimEvent<Note> {
    emit(time, node, Note::ControlEmitted { deployment: DEP.into(), epoch: Epoch(epoch), seq, sample_ts: time })
}

fn accepted(time: u64, from: u64, epoch: u64, seq: u64) -> SimEvent<Note> {
    emit(time, 3, Note::Accepted { deployment: DEP.into(), from: NodeId(from), epoch: Epoch(epoch), seq })
}

fn kinds(v: &[Violation]) -> Vec<&str> {
    v.iter().map(|x| x.invariant.as_str()).collect()
}

fn base() -> Vec<SimEvent<Note>> {
    vec![role(1, 10, NodeRole::ActiveVpc, 1), role(1, 11, NodeRole::InactiveVpc(0), 1), emitted(10, 10, 1, 1), accepted(150, 10, 1, 1)]
}

#[test]
fn clean_hand_trace_passes() {
    assert!(check_invariants(&base(), &cfg()).is_empty());
}

#[test]
fn inactive_emission_is_flagged() {
    let mut t = base();
    t.push(emitted(200, 11, 1, 2));
    let v = check_invariants(&t, &cfg());
    assert_eq!(kinds(&v), [EMISSION_SAFETY]);
    assert_eq!(v[0].index, 4);
}

#[test]
fn fence_regressions_are_flagged() {
    let mut t = base();
    t.push(accepted(300, 10, 1, 1));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [FENCING]);

    let mut t = base();
    t.push(emit(300, 3, Note::Rejected { deployment: DEP.into(), from: NodeId(10), epoch: Epoch(1), seq: 2 }));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [FENCING]);
}

#[test]
fn two_emitters_in_one_epoch_are_flagged() {
    let mut t = base();
    t.push(accepted(300, 12, 1, 2));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [SINGLE_ACTIVE]);
}

#[test]
fn missing_promotion_is_flagged() {
    let mut t = base();
    t.push(SimEvent { time: 1_000, kind: EventKind::NodeKill { node: NodeId(10) } });
    t.push(emit(100_000, 1, Note::DiscoverySent { round: 9, targets: 2 }));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [DETECTION_BOUND]);
    // Promotion in time clears it.
    t.insert(5, emit(30_000, 11, Note::SelfPromoted { deployment: DEP.into(), epoch: Epoch(2), seq: 1 }));
    assert!(check_invariants(&t, &cfg()).is_empty());
}

#[test]
fn unrestored_redundancy_is_flagged() {
    let mut t = base();
    t.push(emit(1_000, 1, Note::BackupRequestHandled { deployment: DEP.into(), from: NodeId(10), epoch: Epoch(1), failed: None }));
    t.push(emit(100_000, 1, Note::DiscoverySent { round: 9, targets: 2 }));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [REDUNDANCY_CONVERGENCE]);
    t.insert(5, emit(2_000, 1, Note::DegradedRedundancy { deployment: DEP.into(), missing: 1 }));
    assert!(check_invariants(&t, &cfg()).is_empty());
}

#[test]
fn diverging_replicas_are_flagged() {
    let mut t = base();
    let d = |b: u8| Digest256([b; 32]);
    t.push(emit(200, 10, Note::Executed { deployment: DEP.into(), seq: 2, hint: 2, digest: d(1) }));
    t.push(emit(210, 11, Note::Executed { deployment: DEP.into(), seq: 2, hint: 2, digest: d(1) }));
    assert!(check_invariants(&t, &cfg()).is_empty());
    t.push(emit(220, 11, Note::Executed { deployment: DEP.into(), seq: 2, hint: 2, digest: d(2) }));
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [REPLICA_CONSISTENCY]);
}

#[test]
fn epoch_regressions_are_flagged() {
    let mut t = base();
    t.push(emitted(300, 10, 0, 5));
    let v = check_invariants(&t, &cfg());
    assert!(kinds(&v).contains(&EPOCH_MONOTONICITY));

    let m = Membership::default();
    let t = vec![
        emit(1, 1, Note::MembersUpdated { deployment: DEP.into(), epoch: Epoch(3), members: m.clone() }),
        emit(2, 1, Note::MembersUpdated { deployment: DEP.into(), epoch: Epoch(2), members: m }),
    ];
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [EPOCH_MONOTONICITY]);
}

#[test]
fn partial_deployment_is_flagged() {
    let members = Membership { active: NodeId(10), inactive: vec![(NodeId(11), 0)], followers: vec![] };
    let promote = |n| emit(5, 1, Note::PromoteIssued { deployment: DEP.into(), node: NodeId(n), role: NodeRole::ActiveVpc, epoch: Epoch(1) });
    let t = vec![emit(5, 1, Note::DeployStarted { deployment: DEP.into(), epoch: Epoch(1), members: members.clone() }), promote(10)];
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [DEPLOY_ATOMICITY]);
    let t = vec![promote(10), emit(5, 1, Note::DeployRejected { deployment: DEP.into(), reason: "x".into() })];
    assert_eq!(kinds(&check_invariants(&t, &cfg())), [DEPLOY_ATOMICITY]);
}

#[test]
fn reordered_golden_trace_breaks_the_hash() {
    let run = run_scenario(&ScenarioScript::preset(Scenario::Startup), 3).unwrap();
    let mut c = ScenarioScript::preset(Scenario::Startup).check_config();
    c.expected_digest = Some(events_digest(&run.trace.events));
    assert!(check_invariants(&run.trace.events, &c).is_empty());
    let mut mutated = run.trace.events.clone();
    let i = mutated.len() / 2;
    mutated.swap(i, i + 1);
    let v = check_invariants(&mutated, &c);
    assert!(kinds(&v).contains(&DETERMINISM), "{v:?}");
}

#[test]
fn golden_scenario_traces_are_clean() {
    // A short fault-free run of every scenario family raises nothing.
    for s in [Scenario::Startup, Scenario::InactiveFailure, Scenario::Redeploy] {
        let script = ScenarioScript::preset(s);
        let run = run_scenario(&script, 21).unwrap();
        assert!(check_invariants(&run.trace.events, &script.check_config()).is_empty());
    }
}

#[test]
fn every_planted_violation_is_found() {
    // Plant one violation of each kind into the same otherwise clean trace.
    let mut t = base();
    t.push(emitted(200, 11, 1, 2));
    t.push(accepted(300, 12, 1, 3));
    t.push(accepted(310, 10, 1, 3));
    let v = check_invariants(&t, &cfg());
    let mut found: BTreeMap<&str, usize> = BTreeMap::new();
    for k in kinds(&v) {
        *found.entry(k).or_default() += 1;
    }
    assert!(found.contains_key(EMISSION_SAFETY));
    assert!(found.contains_key(FENCING));
    assert!(found.contains_key(SINGLE_ACTIVE));
}
