//! Trace invariants. Every check reads only the event list, so hand-made
//! traces exercise the checker exactly like simulated ones.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::Digest256;
use crate::model::{Epoch, Micros, NodeId, NodeRole, TimingBudget};
use crate::note::Note;
use crate::simnet::{events_digest, EventKind, SimEvent};

pub const EMISSION_SAFETY: &str = "emission_safety";
pub const FENCING: &str = "fencing";
pub const SINGLE_ACTIVE: &str = "single_active";
pub const DETECTION_BOUND: &str = "detection_bound";
pub const REDUNDANCY_CONVERGENCE: &str = "redundancy_convergence";
pub const REPLICA_CONSISTENCY: &str = "replica_consistency";
pub const EPOCH_MONOTONICITY: &str = "epoch_monotonicity";
pub const DEPLOY_ATOMICITY: &str = "deploy_atomicity";
pub const DETERMINISM: &str = "determinism";

pub const ALL_INVARIANTS: [&str; 9] = [
    EMISSION_SAFETY,
    FENCING,
    SINGLE_ACTIVE,
    DETECTION_BOUND,
    REDUNDANCY_CONVERGENCE,
    REPLICA_CONSISTENCY,
    EPOCH_MONOTONICITY,
    DEPLOY_ATOMICITY,
    DETERMINISM,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    /// Index into the trace's event list.
    pub index: usize,
    pub time: Micros,
    pub detail: String,
}

/// Parameters the bounds are computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub sync_period: Micros,
    pub miss_threshold: u32,
    pub timing: TimingBudget,
    pub discovery_period: Micros,
    pub redundancy_target: u32,
    /// Golden digest of the event list, if one is recorded.
    pub expected_digest: Option<Digest256>,
}

impl CheckConfig {
    /// Active crash to self-promotion of the rank-0 backup.
    pub fn promotion_bound(&self) -> Micros {
        self.sync_period * Micros::from(self.miss_threshold) + self.timing.jitter_max + self.timing.clock_accuracy
    }

    /// Backup crash to the active's backup request.
    pub fn backup_request_bound(&self) -> Micros {
        self.sync_period * Micros::from(self.miss_threshold + 1) + self.timing.jitter_max + self.timing.clock_accuracy
    }

    /// Backup request to restored redundancy (or a degraded report).
    pub fn convergence_bound(&self) -> Micros {
        self.discovery_period + 5 * self.timing.one_way()
    }
}

#[derive(Default)]
struct Roles {
    role: BTreeMap<NodeId, NodeRole>,
    deployment: BTreeMap<NodeId, String>,
    alive: BTreeSet<NodeId>,
    dead: BTreeSet<NodeId>,
}

impl Roles {
    fn observe(&mut self, e: &EventKind<Note>) {
        match e {
            EventKind::NodeKill { node } => {
                self.dead.insert(*node);
                self.alive.remove(node);
                self.role.remove(node);
            }
            EventKind::NodeRevive { node } => {
                self.dead.remove(node);
                self.role.insert(*node, NodeRole::IdleResource);
                self.deployment.remove(node);
            }
            EventKind::Emit { node, note } => {
                self.alive.insert(*node);
                if let Note::RoleChanged { deployment, to, .. } = note {
                    self.role.insert(*node, *to);
                    if *to == NodeRole::IdleResource {
                        self.deployment.remove(node);
                    } else {
                        self.deployment.insert(*node, deployment.clone());
                    }
                }
            }
            _ => {}
        }
    }

    fn role(&self, n: NodeId) -> NodeRole {
        self.role.get(&n).copied().unwrap_or(NodeRole::IdleResource)
    }

    fn in_deployment(&self, dep: &str) -> impl Iterator<Item = (NodeId, NodeRole)> + '_ {
        let dep = String::from(dep);
        self.deployment
            .iter()
            .filter(move |(n, d)| **d == dep && !self.dead.contains(n))
            .map(|(n, _)| (*n, self.role(*n)))
    }
}

struct Deadline {
    at: Micros,
    index: usize,
    invariant: &'static str,
    detail: String,
}

/// Evaluates every registered invariant.
pub fn check_invariants(events: &[SimEvent<Note>], cfg: &CheckConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |invariant: &str, index: usize, time: Micros, detail: String| {
        out.push(Violation { invariant: invariant.into(), index, time, detail });
    };
    let mut roles = Roles::default();
    let mut fence: BTreeMap<String, (Epoch, u64)> = BTreeMap::new();
    let mut emitter: BTreeMap<(String, Epoch), NodeId> = BTreeMap::new();
    let mut replicas: BTreeMap<(String, u64), (u64, Digest256, NodeId)> = BTreeMap::new();
    let mut emit_epoch: BTreeMap<NodeId, Epoch> = BTreeMap::new();
    let mut plan_epoch: BTreeMap<String, Epoch> = BTreeMap::new();
    let mut deadlines: Vec<Deadline> = Vec::new();
    let mut orch_groups: BTreeMap<(Micros, String), (Vec<(usize, &Note)>, u32)> = BTreeMap::new();
    let end = events.last().map_or(0, |e| e.time);

    for (i, ev) in events.iter().enumerate() {
        let t = ev.time;
        // Expired deadlines are violations; satisfied ones were removed.
        deadlines.retain(|d| {
            if d.at < t {
                v(d.invariant, d.index, d.at, d.detail.clone());
                false
            } else {
                true
            }
        });
        if let EventKind::NodeKill { node } = &ev.kind {
            emit_epoch.remove(node);
            let role = roles.role(*node);
            if let Some(dep) = roles.deployment.get(node).cloned() {
                let peers: Vec<(NodeId, NodeRole)> = roles.in_deployment(&dep).filter(|(n, _)| n != node).collect();
                if role == NodeRole::ActiveVpc && peers.iter().any(|(_, r)| *r == NodeRole::InactiveVpc(0)) {
                    deadlines.push(Deadline {
                        at: t + cfg.promotion_bound(),
                        index: i,
                        invariant: DETECTION_BOUND,
                        detail: format!("active {node} of {dep} killed; no self-promotion"),
                    });
                } else if matches!(role, NodeRole::InactiveVpc(_)) && peers.iter().any(|(_, r)| *r == NodeRole::ActiveVpc) {
                    deadlines.push(Deadline {
                        at: t + cfg.backup_request_bound(),
                        index: i,
                        invariant: DETECTION_BOUND,
                        detail: format!("backup {node} of {dep} killed; no backup request"),
                    });
                }
            }
        }
        if let EventKind::Emit { node, note } = &ev.kind {
            let node = *node;
            match note {
                Note::ControlEmitted { deployment, epoch, .. } => {
                    if roles.role(node) != NodeRole::ActiveVpc {
                        v(EMISSION_SAFETY, i, t, format!("{node} emitted control data for {deployment} as {:?}", roles.role(node)));
                    }
                    if let Some(prev) = emit_epoch.insert(node, *epoch) {
                        if *epoch < prev {
                            v(EPOCH_MONOTONICITY, i, t, format!("{node} emitted epoch {epoch} after {prev}"));
                        }
                    }
                }
                Note::Accepted { deployment, from, epoch, seq } => {
                    let last = fence.get(deployment).copied();
                    if last.is_some_and(|l| (*epoch, *seq) <= l) {
                        v(FENCING, i, t, format!("accepted ({epoch}, {seq}) from {from} after {last:?}"));
                    }
                    fence.insert(deployment.clone(), (*epoch, *seq));
                    match emitter.get(&(deployment.clone(), *epoch)) {
                        Some(prev) if prev != from => {
                            v(SINGLE_ACTIVE, i, t, format!("epoch {epoch} outputs accepted from {prev} and {from}"))
                        }
                        Some(_) => {}
                        None => {
                            emitter.insert((deployment.clone(), *epoch), *from);
                        }
                    }
                }
                Note::Rejected { deployment, from, epoch, seq } => {
                    let last = fence.get(deployment).copied();
                    if last.is_none_or(|l| (*epoch, *seq) > l) {
                        v(FENCING, i, t, format!("rejected admissible ({epoch}, {seq}) from {from}; last {last:?}"));
                    }
                }
                Note::SelfPromoted { deployment, .. } => {
                    deadlines.retain(|d| {
                        !(d.invariant == DETECTION_BOUND && d.detail.contains("no self-promotion") && d.detail.contains(deployment.as_str()))
                    });
                }
                Note::BackupRequestSent { failed: Some(f), deployment, .. } => {
                    let needle = format!("backup {f} of {deployment} killed");
                    deadlines.retain(|d| !d.detail.starts_with(&needle));
                }
                Note::BackupRequestHandled { deployment, .. } => {
                    deadlines.push(Deadline {
                        at: t + cfg.convergence_bound(),
                        index: i,
                        invariant: REDUNDANCY_CONVERGENCE,
                        detail: format!("redundancy of {deployment} not restored"),
                    });
                }
                Note::Redundancy { deployment, ready, target } if ready >= target => {
                    let needle = format!("redundancy of {deployment} not restored");
                    deadlines.retain(|d| d.detail != needle);
                }
                Note::DegradedRedundancy { deployment, .. } => {
                    let needle = format!("redundancy of {deployment} not restored");
                    deadlines.retain(|d| d.detail != needle);
                }
                Note::Executed { deployment, seq, hint, digest } => {
                    match replicas.get(&(deployment.clone(), *seq)) {
                        Some((h, d, other)) if (h, d) != (hint, digest) => v(
                            REPLICA_CONSISTENCY,
                            i,
                            t,
                            format!("seq {seq}: {node} has hint {hint} digest {digest}, {other} had hint {h} digest {d}"),
                        ),
                        Some(_) => {}
                        None => {
                            replicas.insert((deployment.clone(), *seq), (*hint, *digest, node));
                        }
                    }
                }
                Note::MembersUpdated { deployment, epoch, .. } | Note::DeployStarted { deployment, epoch, .. } => {
                    if let Some(prev) = plan_epoch.insert(deployment.clone(), *epoch) {
                        if *epoch < prev {
                            v(EPOCH_MONOTONICITY, i, t, format!("{deployment} plan epoch {epoch} after {prev}"));
                        }
                    }
                }
                _ => {}
            }
            if let Note::DeployStarted { deployment, .. }
            | Note::DeployRejected { deployment, .. }
            | Note::PromoteIssued { deployment, .. } = note
            {
                let g = orch_groups.entry((t, deployment.clone())).or_default();
                g.0.push((i, note));
                if let Note::PromoteIssued { .. } = note {
                    g.1 += 1;
                }
            }
        }
        roles.observe(&ev.kind);
    }
    for d in deadlines {
        if d.at < end {
            v(d.invariant, d.index, d.at, d.detail);
        }
    }
    for ((t, dep), (notes, promotes)) in &orch_groups {
        for (i, n) in notes {
            match n {
                Note::DeployStarted { members, .. } => {
                    let want = members.nodes().count() as u32;
                    if *promotes < want {
                        v(DEPLOY_ATOMICITY, *i, *t, format!("{dep} started with {want} members but {promotes} promotions"));
                    }
                }
                Note::DeployRejected { .. } if *promotes > 0 && !notes.iter().any(|(_, n)| matches!(n, Note::DeployStarted { .. })) => {
                    v(DEPLOY_ATOMICITY, *i, *t, format!("{dep} rejected after {promotes} promotions"));
                }
                _ => {}
            }
        }
    }
    if let Some(want) = cfg.expected_digest {
        let got = events_digest(events);
        if got != want {
            v(DETERMINISM, events.len(), end, format!("trace digest {got}, expected {want}"));
        }
    }
    out.sort_by_key(|x| (x.index, x.invariant.clone()));
    out
}
