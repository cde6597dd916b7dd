use vpc_core::harness::{sweep_failure_times, Scenario, ScenarioScript, Target};
use vpc_core::model::NodeId;
use vpc_host::session::{parse_duration, parse_script, parse_target, Command, Outcome, Session, When};
use vpc_host::sweep::par_sweep;

#[test]
fn durations_and_targets() {
    assert_eq!(parse_duration("250us"), Some(250));
    assert_eq!(parse_duration("10ms"), Some(10_000));
    assert_eq!(parse_duration("2s"), Some(2_000_000));
    assert_eq!(parse_duration("42"), Some(42));
    assert_eq!(parse_duration("ms"), None);
    assert_eq!(parse_duration("-1ms"), None);
    assert_eq!(parse_target("active"), Some(Target::Active));
    assert_eq!(parse_target("inactive1"), Some(Target::Inactive { rank: 1 }));
    assert_eq!(parse_target("n12"), Some(Target::Node { id: NodeId(12) }));
    assert_eq!(parse_target("12"), Some(Target::Node { id: NodeId(12) }));
    assert_eq!(parse_target("leader"), None);
}

#[test]
fn scripts_keep_line_numbers() {
    let text = "# warm up\nseed 3\n\nuntil 5ms\ndeploy\nreconfigure loop-1 at 300ms  # later\nisolate inactive0 for 40ms\n";
    let cmds = parse_script(text).unwrap();
    let lines: Vec<usize> = cmds.iter().map(|(l, _)| *l).collect();
    assert_eq!(lines, [2, 4, 5, 6, 7]);
    assert_eq!(cmds[3].1, Command::Reconfigure { deployment: "loop-1".into(), spec: None, when: When::At(300_000) });
    assert_eq!(cmds[4].1, Command::Isolate(Target::Inactive { rank: 0 }, 40_000));
    let err = parse_script("run 1ms\npartition active for 1ms\n").unwrap_err();
    assert_eq!(err.line, 2);
    assert!(parse_script("fly away\n").is_err());
}

#[test]
fn session_kills_the_active_and_the_backup_takes_over() {
    let mut s = Session::new(Default::default(), 1);
    s.exec(&Command::Until(5_000)).unwrap();
    let Outcome::Plan(plan) = s.exec(&Command::Deploy(None)).unwrap() else { panic!() };
    s.exec(&Command::Run(100_000)).unwrap();
    s.exec(&Command::Kill(Target::Active)).unwrap();
    s.exec(&Command::Run(100_000)).unwrap();
    let view = s.status().unwrap();
    assert!(!view.nodes[&plan.active].alive);
    let backup = plan.inactive[0].0;
    assert_eq!(format!("{:?}", view.nodes[&backup].status.role), "ActiveVpc");
    let (_, violations) = s.finish().unwrap();
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn settings_are_fixed_once_running() {
    let mut s = Session::new(Default::default(), 1);
    s.exec(&Command::Run(1_000)).unwrap();
    let err = s.exec(&Command::Seed(9)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = s.exec(&Command::Until(10)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn early_handover_is_refused() {
    let mut s = Session::new(Default::default(), 1);
    s.exec(&Command::Until(5_000)).unwrap();
    s.exec(&Command::Deploy(None)).unwrap();
    s.exec(&Command::Run(100_000)).unwrap();
    let cmd = Command::Reconfigure { deployment: "loop-1".into(), spec: None, when: When::In(1_000) };
    let err = s.exec(&cmd).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("earliest"), "{err}");
}

#[test]
fn parallel_sweep_matches_sequential() {
    let base = ScenarioScript::preset(Scenario::ActiveFailure);
    let range = (200_000, 201_000);
    let seeds = [1, 2, 3];
    let a = par_sweep(&base, &Target::Active, range, 250, &seeds).unwrap();
    let b = sweep_failure_times(&base, &Target::Active, range, 250, &seeds).unwrap();
    assert_eq!(a.runs, 12);
    assert_eq!(a, b);
}
