//! Executable scenarios: startup, normal operation, the three failure
//! cases and scheduled redeployment, plus failure-time sweeps and the
//! frame-latency benchmark.

pub mod bench;
pub mod check;
pub mod cluster;
pub mod metrics;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeploymentSpec, Micros, NodeId, ResourceDemand};
use crate::note::{Note, Purpose};
use crate::orchestrator::DeploymentPlan;
use crate::simnet::{EventKind, SimError};

pub use check::{check_invariants, CheckConfig, Violation};
pub use cluster::{Cluster, ClusterSpec, ClusterTrace, Component, ComponentStatus, ICPS, REGISTRY, VPCMO};
pub use metrics::{Metrics, Percentiles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "1")]
    Startup,
    #[serde(rename = "2")]
    Normal,
    #[serde(rename = "3a")]
    InactiveFailure,
    #[serde(rename = "3b")]
    ActiveFailure,
    #[serde(rename = "3c")]
    Partition,
    /// The backup loses every link, the orchestrator's included.
    #[serde(rename = "3c-isolated")]
    PartitionIsolated,
    #[serde(rename = "4")]
    Redeploy,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Startup,
        Scenario::Normal,
        Scenario::InactiveFailure,
        Scenario::ActiveFailure,
        Scenario::Partition,
        Scenario::PartitionIsolated,
        Scenario::Redeploy,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::Startup => "1",
            Scenario::Normal => "2",
            Scenario::InactiveFailure => "3a",
            Scenario::ActiveFailure => "3b",
            Scenario::Partition => "3c",
            Scenario::PartitionIsolated => "3c-isolated",
            Scenario::Redeploy => "4",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scenario {
    type Err = ScriptError;
    fn from_str(s: &str) -> Result<Self, ScriptError> {
        Scenario::ALL.into_iter().find(|x| x.id() == s).ok_or_else(|| ScriptError::UnknownScenario(s.to_string()))
    }
}

/// Who a fault hits; deployment roles resolve against the orchestrator's
/// plan at injection time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum Target {
    Active,
    Inactive { rank: u8 },
    Node { id: NodeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    Kill { target: Target },
    Revive { target: Target },
    /// Cuts every link between the two groups for `duration`.
    Partition { a: Vec<Target>, b: Vec<Target>, duration: Micros },
    /// Cuts every link of the target.
    Isolate { target: Target, duration: Micros },
    /// Redeploys onto fresh resources with the handover `handover_in`
    /// after the injection.
    Redeploy { handover_in: Micros },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub at: Micros,
    #[serde(flatten)]
    pub fault: Fault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub scenario: Scenario,
    pub cluster: ClusterSpec,
    pub spec: DeploymentSpec,
    /// When the operator asks for the deployment.
    pub deploy_at: Micros,
    pub injections: Vec<Injection>,
    pub duration: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ScriptError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("injection at {at} is not before the end of the run at {duration}")]
    InjectionAfterEnd { at: Micros, duration: Micros },
    #[error("deployment at {at} is not before the end of the run at {duration}")]
    DeployAfterEnd { at: Micros, duration: Micros },
    #[error("invalid deployment spec: {0}")]
    InvalidSpec(String),
    #[error("cluster has no idle resources")]
    NoResources,
    #[error("simulator: {0}")]
    Sim(String),
}

impl From<SimError> for ScriptError {
    fn from(e: SimError) -> Self {
        ScriptError::Sim(e.to_string())
    }
}

pub const DEPLOYMENT: &str = "loop-1";

/// The controller every preset deploys: one PID loop, one backup.
pub fn default_spec(cluster: &ClusterSpec) -> DeploymentSpec {
    DeploymentSpec {
        deployment_id: DEPLOYMENT.into(),
        vpfs: cluster.artifacts.iter().map(|a| a.descriptor()).collect(),
        redundancy_count: 1,
        sync_period: 10_000,
        miss_threshold: 3,
        control_period: cluster.control_period,
        snapshot_every: 10,
        resources: ResourceDemand::default(),
    }
}

const MS: Micros = 1_000;

impl ScenarioScript {
    pub fn preset(scenario: Scenario) -> Self {
        let mut cluster = ClusterSpec::default();
        let fault_at = 200 * MS;
        let (irs, injections, duration) = match scenario {
            Scenario::Startup => (4, Vec::new(), 1_000 * MS),
            // Ten thousand control cycles after the first output.
            Scenario::Normal => (3, Vec::new(), 10_020 * MS),
            Scenario::InactiveFailure => {
                (4, alloc::vec![Injection { at: fault_at, fault: Fault::Kill { target: Target::Inactive { rank: 0 } } }], 400 * MS)
            }
            Scenario::ActiveFailure => {
                (4, alloc::vec![Injection { at: fault_at, fault: Fault::Kill { target: Target::Active } }], 400 * MS)
            }
            Scenario::Partition => (
                4,
                alloc::vec![Injection {
                    at: fault_at,
                    fault: Fault::Partition {
                        a: alloc::vec![Target::Active],
                        b: alloc::vec![Target::Inactive { rank: 0 }],
                        duration: 100 * MS,
                    },
                }],
                400 * MS,
            ),
            Scenario::PartitionIsolated => (
                4,
                alloc::vec![Injection {
                    at: fault_at,
                    fault: Fault::Isolate { target: Target::Inactive { rank: 0 }, duration: 100 * MS },
                }],
                400 * MS,
            ),
            Scenario::Redeploy => {
                (5, alloc::vec![Injection { at: fault_at, fault: Fault::Redeploy { handover_in: 100 * MS } }], 500 * MS)
            }
        };
        cluster.irs = alloc::vec![cluster::IrSpec::default(); irs];
        let spec = default_spec(&cluster);
        ScenarioScript { scenario, cluster, spec, deploy_at: 5 * MS, injections, duration }
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        self.spec.validate().map_err(|e| ScriptError::InvalidSpec(e.to_string()))?;
        if self.cluster.irs.is_empty() {
            return Err(ScriptError::NoResources);
        }
        if self.deploy_at >= self.duration {
            return Err(ScriptError::DeployAfterEnd { at: self.deploy_at, duration: self.duration });
        }
        if let Some(i) = self.injections.iter().find(|i| i.at >= self.duration) {
            return Err(ScriptError::InjectionAfterEnd { at: i.at, duration: self.duration });
        }
        Ok(())
    }

    pub fn check_config(&self) -> CheckConfig {
        CheckConfig {
            sync_period: self.spec.sync_period,
            miss_threshold: self.spec.miss_threshold,
            timing: self.cluster.timing(),
            discovery_period: self.cluster.discovery_period,
            redundancy_target: u32::from(self.spec.redundancy_count),
            expected_digest: None,
        }
    }
}

/// What an operator-level operation returned during the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operation {
    pub at: Micros,
    pub op: String,
    pub result: Result<DeploymentPlan, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub scenario: Scenario,
    pub seed: u64,
    /// Digest of the event list.
    pub trace_digest: String,
    pub events: u64,
    pub metrics: Metrics,
    pub operations: Vec<Operation>,
    pub violations: Vec<Violation>,
}

impl TraceReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub struct ScenarioRun {
    pub report: TraceReport,
    pub trace: ClusterTrace,
}

/// The node `t` names in deployment `dep`'s current plan.
pub fn resolve_target(cluster: &Cluster, dep: &str, t: &Target) -> Option<NodeId> {
    match t {
        Target::Node { id } => Some(*id),
        Target::Active => cluster.plan(dep).map(|p| p.active),
        Target::Inactive { rank } => cluster.plan(dep)?.inactive.iter().find(|(_, r)| r == rank).map(|(n, _)| *n),
    }
}

fn apply(cluster: &mut Cluster, script: &ScenarioScript, inj: &Injection) -> Result<Option<Operation>, ScriptError> {
    let dep = script.spec.deployment_id.as_str();
    let now = cluster.now();
    let unresolved = |t: &Target| ScriptError::Sim(format!("no node for {t:?} at {now}"));
    let one = |c: &Cluster, t: &Target| resolve_target(c, dep, t).ok_or_else(|| unresolved(t));
    match &inj.fault {
        Fault::Kill { target } => {
            let n = one(cluster, target)?;
            cluster.sim.kill_node(n, now)?;
        }
        Fault::Revive { target } => {
            let n = one(cluster, target)?;
            cluster.sim.revive_node(n, now)?;
        }
        Fault::Partition { a, b, duration } => {
            let a = a.iter().map(|t| one(cluster, t)).collect::<Result<Vec<_>, _>>()?;
            let b = b.iter().map(|t| one(cluster, t)).collect::<Result<Vec<_>, _>>()?;
            cluster.sim.partition(&a, &b, now, now.saturating_add(*duration))?;
        }
        Fault::Isolate { target, duration } => {
            let n = one(cluster, target)?;
            let rest: Vec<NodeId> = cluster.spec.node_ids().into_iter().filter(|x| *x != n).collect();
            cluster.sim.partition(&[n], &rest, now, now.saturating_add(*duration))?;
        }
        Fault::Redeploy { handover_in } => {
            let at = now + handover_in;
            let result = cluster.redeploy(dep, script.spec.clone(), at).map_err(|e| e.to_string());
            return Ok(Some(Operation { at: now, op: format!("redeploy handover_at={at}"), result }));
        }
    }
    Ok(None)
}

/// Runs a script end to end and checks it.
pub fn run_scenario(script: &ScenarioScript, seed: u64) -> Result<ScenarioRun, ScriptError> {
    script.validate()?;
    let mut cluster = Cluster::new(&script.cluster, seed)?;
    cluster.run_until(script.deploy_at);
    let result = cluster.deploy(script.spec.clone()).map_err(|e| e.to_string());
    let mut operations = alloc::vec![Operation { at: script.deploy_at, op: "deploy".into(), result }];
    let mut injections = script.injections.clone();
    injections.sort_by_key(|i| i.at);
    for inj in &injections {
        cluster.run_until(inj.at);
        if let Some(op) = apply(&mut cluster, script, inj)? {
            operations.push(op);
        }
    }
    cluster.run_until(script.duration);
    let trace = cluster.into_trace();
    let mut violations = check_invariants(&trace.events, &script.check_config());
    if script.scenario == Scenario::Startup {
        violations.extend(startup_order(&trace.events));
    }
    let metrics = metrics::extract(&trace.events, u32::from(script.spec.redundancy_count));
    let report = TraceReport {
        scenario: script.scenario,
        seed,
        trace_digest: trace.digest().to_string(),
        events: trace.events.len() as u64,
        metrics,
        operations,
        violations,
    };
    Ok(ScenarioRun { report, trace })
}

pub const STARTUP_ORDER: &str = "startup_order";

/// The startup milestones in the order they must first appear:
/// discovery, registration, selection, active promotion, rank-0
/// promotion, artifact fetch, readiness.
pub fn startup_milestones(events: &[crate::simnet::SimEvent<Note>]) -> [Option<usize>; 7] {
    let mut m = [None; 7];
    let mut set = |k: usize, i: usize| {
        if m[k].is_none() {
            m[k] = Some(i);
        }
    };
    for (i, ev) in events.iter().enumerate() {
        let EventKind::Emit { note, .. } = &ev.kind else { continue };
        match note {
            Note::DiscoverySent { .. } => set(0, i),
            Note::IrRegistered { .. } => set(1, i),
            Note::Selected { purpose: Purpose::Active, chosen: Some(_), .. } => set(2, i),
            Note::PromoteIssued { role: crate::model::NodeRole::ActiveVpc, .. } => set(3, i),
            Note::PromoteIssued { role: crate::model::NodeRole::InactiveVpc(0), .. } => set(4, i),
            Note::FetchRequested { .. } => set(5, i),
            Note::DeploymentReady { .. } => set(6, i),
            _ => {}
        }
    }
    m
}

fn startup_order(events: &[crate::simnet::SimEvent<Note>]) -> Vec<Violation> {
    const NAMES: [&str; 7] = ["discovery", "register", "select", "promote_active", "promote_inactive", "fetch", "ready"];
    let m = startup_milestones(events);
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for (k, at) in m.iter().enumerate() {
        match at {
            None => out.push(Violation {
                invariant: STARTUP_ORDER.into(),
                index: events.len(),
                time: events.last().map_or(0, |e| e.time),
                detail: format!("{} never happened", NAMES[k]),
            }),
            Some(i) => {
                if prev.is_some_and(|p| p > *i) {
                    out.push(Violation {
                        invariant: STARTUP_ORDER.into(),
                        index: *i,
                        time: events[*i].time,
                        detail: format!("{} before {}", NAMES[k], NAMES[k - 1]),
                    });
                }
                prev = Some(*i);
            }
        }
    }
    out
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fault_at: Micros,
    pub seed: u64,
    pub trace_digest: String,
    pub metrics: Metrics,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: u64,
    pub failed_runs: u64,
    pub worst_detection_us: Option<Micros>,
    pub worst_actuator_gap_us: Micros,
    pub worst_missed_cycles: u64,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Folds one point into the aggregate.
    pub fn push(&mut self, p: SweepPoint) {
        self.runs += 1;
        if !p.violations.is_empty() {
            self.failed_runs += 1;
        }
        self.worst_detection_us = self.worst_detection_us.max(p.metrics.failover_detection_us);
        self.worst_actuator_gap_us = self.worst_actuator_gap_us.max(p.metrics.max_actuator_gap_us);
        self.worst_missed_cycles = self.worst_missed_cycles.max(p.metrics.missed_control_cycles);
        self.points.push(p);
    }
}

/// The `(fault time, seed)` grid: `t_range` is half open.
pub fn sweep_grid(t_range: (Micros, Micros), step: Micros, seeds: &[u64]) -> Vec<(Micros, u64)> {
    let mut out = Vec::new();
    if step == 0 {
        return out;
    }
    let mut t = t_range.0;
    while t < t_range.1 {
        out.extend(seeds.iter().map(|s| (t, *s)));
        t += step;
    }
    out
}

/// The base script with the first `Kill` of `target` (or a new one) moved
/// to `fault_at`.
pub fn with_fault_at(base: &ScenarioScript, target: &Target, fault_at: Micros) -> ScenarioScript {
    let mut s = base.clone();
    s.injections.retain(|i| !matches!(&i.fault, Fault::Kill { target: t } if t == target));
    s.injections.push(Injection { at: fault_at, fault: Fault::Kill { target: target.clone() } });
    s
}

pub fn sweep_point(base: &ScenarioScript, target: &Target, fault_at: Micros, seed: u64) -> Result<SweepPoint, ScriptError> {
    let run = run_scenario(&with_fault_at(base, target, fault_at), seed)?;
    Ok(SweepPoint {
        fault_at,
        seed,
        trace_digest: run.report.trace_digest,
        metrics: run.report.metrics,
        violations: run.report.violations,
    })
}

/// Sequential sweep; the host crate runs the same grid in parallel.
pub fn sweep_failure_times(
    base: &ScenarioScript,
    target: &Target,
    t_range: (Micros, Micros),
    step: Micros,
    seeds: &[u64],
) -> Result<SweepReport, ScriptError> {
    let mut report = SweepReport::default();
    for (t, seed) in sweep_grid(t_range, step, seeds) {
        report.push(sweep_point(base, target, t, seed)?);
    }
    Ok(report)
}
