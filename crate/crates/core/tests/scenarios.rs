use vpc_core::harness::cluster::{ir_id, IrSpec};
use vpc_core::harness::*;
use vpc_core::model::{NodeRole, SemVer};
use vpc_core::note::Note;
use vpc_core::orchestrator::OrchError;
use vpc_core::simnet::EventKind;

fn notes(trace: &ClusterTrace) -> impl Iterator<Item = (u64, vpc_core::model::NodeId, &Note)> {
    trace.events.iter().filter_map(|e| match &e.kind {
        EventKind::Emit { node, note } => Some((e.time, *node, note)),
        _ => None,
    })
}

fn run(s: Scenario, seed: u64) -> ScenarioRun {
    run_scenario(&ScenarioScript::preset(s), seed).unwrap()
}

#[test]
fn every_preset_is_clean_for_several_seeds() {
    for s in Scenario::ALL {
        if s == Scenario::Normal {
            continue;
        }
        for seed in [1, 2, 3] {
            let r = run(s, seed).report;
            assert!(r.violations.is_empty(), "{s} seed {seed}: {:?}", r.violations);
            assert!(r.operations.iter().all(|o| o.result.is_ok()), "{s}: {:?}", r.operations);
        }
    }
}

#[test]
fn startup_reaches_every_milestone_in_order() {
    let run = run(Scenario::Startup, 7);
    let m = startup_milestones(&run.trace.events);
    let idx: Vec<usize> = m.iter().map(|x| x.expect("milestone missing")).collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
    let plan = run.report.operations[0].result.clone().unwrap();
    assert_eq!(plan.inactive.len(), 1);
    assert_eq!(plan.inactive[0].1, 0);
}

#[test]
fn same_seed_same_trace_other_seed_other_trace() {
    for s in [Scenario::Startup, Scenario::ActiveFailure, Scenario::Redeploy] {
        let a = run(s, 11);
        let b = run(s, 11);
        assert_eq!(a.report, b.report);
        assert_eq!(a.trace, b.trace);
        assert_ne!(a.report.trace_digest, run(s, 12).report.trace_digest);
    }
}

#[test]
fn active_failure_promotes_rank_zero_once() {
    let script = ScenarioScript::preset(Scenario::ActiveFailure);
    let run = run_scenario(&script, 5).unwrap();
    let m = &run.report.metrics;
    assert_eq!(m.self_promotions, 1);
    let bound = script.check_config().promotion_bound();
    assert!(m.failover_detection_us.unwrap() <= bound, "{m:?}");
    let promoted: Vec<_> = notes(&run.trace).filter(|(_, _, n)| matches!(n, Note::SelfPromoted { .. })).collect();
    let plan = run.report.operations[0].result.clone().unwrap();
    assert_eq!(promoted[0].1, plan.inactive[0].0);
    // Redundancy came back with a fresh node.
    assert!(notes(&run.trace).any(|(_, _, n)| matches!(n, Note::Redundancy { ready: 1, target: 1, .. })));
}

#[test]
fn partition_is_resolved_by_one_disable() {
    let run = run(Scenario::Partition, 3);
    let m = &run.report.metrics;
    assert!(m.double_status >= 1);
    assert_eq!(m.disables, 1);
    let disabled: Vec<_> = run
        .trace
        .final_states
        .values()
        .filter(|s| matches!(&s.status, ComponentStatus::Node(n) if n.role == NodeRole::Disabled))
        .collect();
    assert_eq!(disabled.len(), 1);
    let actives = run
        .trace
        .final_states
        .values()
        .filter(|s| matches!(&s.status, ComponentStatus::Node(n) if n.role == NodeRole::ActiveVpc))
        .count();
    assert_eq!(actives, 1);
}

#[test]
fn isolated_backup_never_disturbs_the_active() {
    let run = run(Scenario::PartitionIsolated, 9);
    let plan = run.report.operations[0].result.clone().unwrap();
    let accepted: Vec<(u64, u64)> = notes(&run.trace)
        .filter_map(|(t, _, n)| match n {
            Note::Accepted { from, seq, .. } if *from == plan.active => Some((t, *seq)),
            _ => None,
        })
        .collect();
    assert!(accepted.windows(2).all(|w| w[1].1 == w[0].1 + 1), "gap in the active's stream");
    assert_eq!(run.report.metrics.missed_control_cycles, 0);
    assert!(notes(&run.trace).all(|(_, n, note)| !(n == plan.active && matches!(note, Note::Disabled { .. }))));
}

#[test]
fn redeploy_hands_over_and_releases() {
    let run = run(Scenario::Redeploy, 4);
    let old = run.report.operations[0].result.clone().unwrap();
    let new = run.report.operations[1].result.clone().unwrap();
    assert_eq!(run.report.metrics.missed_control_cycles, 0);
    assert_eq!(run.report.metrics.handovers_committed, 1);
    for n in std::iter::once(old.active).chain(old.inactive.iter().map(|x| x.0)) {
        let ComponentStatus::Node(s) = &run.trace.final_states[&n].status else { panic!() };
        assert_eq!(s.role, NodeRole::IdleResource, "{n}");
    }
    let ComponentStatus::Node(s) = &run.trace.final_states[&new.active].status else { panic!() };
    assert_eq!(s.role, NodeRole::ActiveVpc);
    // Seq numbers run on across the boundary.
    let seqs: Vec<(vpc_core::model::NodeId, u64)> = notes(&run.trace)
        .filter_map(|(_, _, n)| match n {
            Note::Accepted { from, seq, .. } => Some((*from, *seq)),
            _ => None,
        })
        .collect();
    let first_new = seqs.iter().position(|(f, _)| *f == new.active).unwrap();
    assert_eq!(seqs[first_new - 1].0, old.active);
    assert_eq!(seqs[first_new].1, seqs[first_new - 1].1 + 1);
}

#[test]
fn handover_too_soon_is_rejected() {
    let mut script = ScenarioScript::preset(Scenario::Redeploy);
    script.injections[0].fault = Fault::Redeploy { handover_in: 1_000 };
    let run = run_scenario(&script, 1).unwrap();
    let err = run.report.operations[1].result.clone().unwrap_err();
    assert!(err.starts_with("HandoverTooSoon"), "{err}");
    assert!(run.report.violations.is_empty());
}

#[test]
fn deploy_is_all_or_nothing() {
    let spec = ClusterSpec { irs: vec![IrSpec::default(); 1], ..ClusterSpec::default() };
    let mut cluster = Cluster::new(&spec, 1).unwrap();
    cluster.run_until(5_000);
    let err = cluster.deploy(default_spec(&spec)).unwrap_err();
    assert_eq!(err, OrchError::InsufficientResources { needed: 2, available: 1 });
    cluster.run_until(50_000);
    let trace = cluster.into_trace();
    assert!(!trace.events.iter().any(|e| matches!(&e.kind, EventKind::Emit { note: Note::PromoteIssued { .. }, .. })));
}

#[test]
fn capacity_filters_candidates() {
    let spec = ClusterSpec { irs: vec![IrSpec { cpu: 1, mem: 64 }, IrSpec { cpu: 8, mem: 8192 }, IrSpec { cpu: 8, mem: 8192 }], ..ClusterSpec::default() };
    let mut cluster = Cluster::new(&spec, 1).unwrap();
    cluster.run_until(5_000);
    let mut d = default_spec(&spec);
    d.resources.cpu = 2;
    let plan = cluster.deploy(d).unwrap();
    assert_eq!(plan.active, ir_id(1));
    assert_eq!(plan.inactive, vec![(ir_id(2), 0)]);
}

#[test]
fn empty_pool_degrades_then_recovers() {
    let mut script = ScenarioScript::preset(Scenario::InactiveFailure);
    script.cluster.irs = vec![IrSpec::default(); 2];
    script.injections.push(Injection { at: 300_000, fault: Fault::Revive { target: Target::Node { id: ir_id(1) } } });
    let run = run_scenario(&script, 2).unwrap();
    assert!(run.report.violations.is_empty(), "{:?}", run.report.violations);
    let degraded = notes(&run.trace).position(|(_, _, n)| matches!(n, Note::DegradedRedundancy { .. })).unwrap();
    let restored = notes(&run.trace)
        .position(|(t, _, n)| t > 300_000 && matches!(n, Note::Redundancy { ready: 1, target: 1, .. }))
        .expect("revived node was not reused");
    assert!(degraded < restored);
}

#[test]
fn corrupt_artifact_is_refused() {
    let mut script = ScenarioScript::preset(Scenario::Startup);
    script.cluster.corrupt = vec!["pid".into()];
    script.duration = 100_000;
    let run = run_scenario(&script, 1).unwrap();
    assert!(notes(&run.trace).any(|(_, _, n)| matches!(n, Note::DigestMismatch { .. })));
    assert!(!notes(&run.trace).any(|(_, _, n)| matches!(n, Note::ControlEmitted { .. })));
    assert_eq!(run.report.metrics.accepted, 0);
}

#[test]
fn unknown_artifact_version_faults_promotion() {
    let mut script = ScenarioScript::preset(Scenario::Startup);
    script.spec.vpfs[0].version = SemVer::new(9, 9, 9);
    script.duration = 100_000;
    let run = run_scenario(&script, 1).unwrap();
    assert!(notes(&run.trace).any(|(_, _, n)| matches!(n, Note::VpfFault { .. })));
    assert_eq!(run.report.metrics.accepted, 0);
}

#[test]
fn scripts_are_validated() {
    let mut s = ScenarioScript::preset(Scenario::ActiveFailure);
    s.injections[0].at = s.duration;
    assert!(matches!(run_scenario(&s, 1), Err(ScriptError::InjectionAfterEnd { .. })));
    let mut s = ScenarioScript::preset(Scenario::Startup);
    s.spec.miss_threshold = 0;
    assert!(matches!(run_scenario(&s, 1), Err(ScriptError::InvalidSpec(_))));
    assert!("5".parse::<Scenario>().is_err());
    for s in Scenario::ALL {
        assert_eq!(s.id().parse::<Scenario>().unwrap(), s);
    }
}

#[test]
fn lossy_links_do_not_break_safety() {
    let mut script = ScenarioScript::preset(Scenario::ActiveFailure);
    script.cluster.link.drop_probability = 0.01;
    for seed in 1..=5 {
        let run = run_scenario(&script, seed).unwrap();
        let safety: Vec<_> = run
            .report
            .violations
            .iter()
            .filter(|v| [check::EMISSION_SAFETY, check::FENCING, check::SINGLE_ACTIVE].contains(&v.invariant.as_str()))
            .collect();
        assert!(safety.is_empty(), "seed {seed}: {safety:?}");
    }
}

#[test]
fn sweep_grid_shapes() {
    assert!(sweep_grid((10, 10), 1, &[1, 2]).is_empty());
    assert!(sweep_grid((0, 10), 0, &[1]).is_empty());
    assert_eq!(sweep_grid((0, 300), 100, &[1, 2]), vec![(0, 1), (0, 2), (100, 1), (100, 2), (200, 1), (200, 2)]);
    let base = ScenarioScript::preset(Scenario::InactiveFailure);
    let r = sweep_failure_times(&base, &Target::Inactive { rank: 0 }, (5, 5), 100, &[1]).unwrap();
    assert_eq!(r, SweepReport::default());
}

#[test]
fn small_sweeps_hold_every_invariant() {
    let seeds = [1, 2];
    for (s, target) in [(Scenario::InactiveFailure, Target::Inactive { rank: 0 }), (Scenario::ActiveFailure, Target::Active)] {
        let base = ScenarioScript::preset(s);
        let r = sweep_failure_times(&base, &target, (200_000, 210_000), 2_500, &seeds).unwrap();
        assert_eq!(r.runs, 8);
        assert_eq!(r.failed_runs, 0, "{s}");
    }
}
