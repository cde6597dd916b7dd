//! Figures of merit extracted from a trace.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{Micros, NodeId, NodeRole};
use crate::note::Note;
use crate::simnet::{EventKind, SimEvent};

/// Nearest-rank percentile table over integer samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: u64,
    pub min: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl Percentiles {
    pub fn of(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Percentiles::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        Percentiles {
            count: s.len() as u64,
            min: s[0],
            p50: nearest_rank(&s, 50),
            p90: nearest_rank(&s, 90),
            p99: nearest_rank(&s, 99),
            max: s[s.len() - 1],
        }
    }
}

/// The smallest sample with at least `p` percent of samples at or below it.
pub fn nearest_rank(sorted: &[u64], p: u64) -> u64 {
    let n = sorted.len() as u64;
    let rank = (p * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Control cycles whose output never reached the actuator, counted as
    /// gaps in the accepted sequence numbers.
    pub missed_control_cycles: u64,
    /// Worst time from a crash to its detection (self-promotion for an
    /// active, backup request for a backup).
    pub failover_detection_us: Option<Micros>,
    /// Total time two non-disabled nodes both held the active role outside
    /// a scheduled handover.
    pub double_active_window_us: Micros,
    /// Total time fewer backups than targeted were alive and ready, after
    /// the target was first reached.
    pub redundancy_gap_us: Micros,
    /// Frame delivery latency.
    pub latency: Percentiles,
    /// Longest interval between consecutive accepted outputs.
    pub max_actuator_gap_us: Micros,
    pub samples: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub self_promotions: u64,
    pub double_status: u64,
    pub disables: u64,
    pub backup_requests: u64,
    pub stale_epochs: u64,
    pub handovers_committed: u64,
    pub handovers_aborted: u64,
    pub releases: u64,
    pub wire_errors: u64,
    pub dropped_frames: u64,
}

/// Computes the metrics; `redundancy_target` is the configured backup
/// count.
pub fn extract(events: &[SimEvent<Note>], redundancy_target: u32) -> Metrics {
    let mut m = Metrics::default();
    let mut latencies = Vec::new();
    let mut last_accept: BTreeMap<&str, (Micros, u64)> = BTreeMap::new();
    let mut role: BTreeMap<NodeId, (NodeRole, &str)> = BTreeMap::new();
    let mut handover_nodes: BTreeSet<NodeId> = BTreeSet::new();
    let mut ready: BTreeSet<NodeId> = BTreeSet::new();
    let mut kills: Vec<(Micros, NodeId, NodeRole, &str)> = Vec::new();
    let mut detections: Vec<Micros> = Vec::new();
    let mut prev_t = 0;
    let mut double_now = false;
    let mut short_now = false;
    let mut target_reached = false;

    for ev in events {
        let t = ev.time;
        if double_now {
            m.double_active_window_us += t - prev_t;
        }
        if short_now {
            m.redundancy_gap_us += t - prev_t;
        }
        prev_t = t;
        match &ev.kind {
            EventKind::Deliver { sent_at, .. } => latencies.push(t - sent_at),
            EventKind::Drop { .. } => m.dropped_frames += 1,
            EventKind::NodeKill { node } => {
                if let Some((r, d)) = role.remove(node) {
                    kills.push((t, *node, r, d));
                }
                handover_nodes.remove(node);
                ready.remove(node);
            }
            EventKind::NodeRevive { node } => {
                ready.remove(node);
            }
            EventKind::Emit { node, note } => match note {
                Note::Sampled { .. } => m.samples += 1,
                Note::Accepted { deployment, seq, .. } => {
                    m.accepted += 1;
                    if let Some((pt, ps)) = last_accept.get(deployment.as_str()) {
                        m.max_actuator_gap_us = m.max_actuator_gap_us.max(t - pt);
                        if *seq > ps + 1 {
                            m.missed_control_cycles += seq - ps - 1;
                        }
                    }
                    let best = last_accept.get(deployment.as_str()).map_or(*seq, |(_, ps)| (*ps).max(*seq));
                    last_accept.insert(deployment, (t, best));
                }
                Note::Rejected { .. } => m.rejected += 1,
                Note::RoleChanged { deployment, to, handover, .. } => {
                    if *to == NodeRole::ActiveVpc && *handover {
                        handover_nodes.insert(*node);
                    } else if *to != NodeRole::ActiveVpc {
                        handover_nodes.remove(node);
                    }
                    if matches!(to, NodeRole::IdleResource | NodeRole::Disabled) {
                        role.remove(node);
                        ready.remove(node);
                    } else {
                        role.insert(*node, (*to, deployment));
                    }
                }
                Note::Ready { .. } => {
                    ready.insert(*node);
                }
                Note::SelfPromoted { deployment, .. } => {
                    m.self_promotions += 1;
                    if let Some(k) = kills.iter().rev().find(|k| k.2 == NodeRole::ActiveVpc && k.3 == deployment) {
                        detections.push(t - k.0);
                    }
                }
                Note::BackupRequestSent { deployment, failed, .. } => {
                    m.backup_requests += 1;
                    if let Some(k) = kills.iter().rev().find(|k| Some(k.1) == *failed && k.3 == deployment && matches!(k.2, NodeRole::InactiveVpc(_))) {
                        detections.push(t - k.0);
                    }
                }
                Note::DoubleActive { .. } => m.double_status += 1,
                Note::Disabled { .. } => m.disables += 1,
                Note::StaleEpoch { .. } => m.stale_epochs += 1,
                Note::HandoverCommitted { .. } => m.handovers_committed += 1,
                Note::HandoverAborted { .. } => m.handovers_aborted += 1,
                Note::Released { .. } => m.releases += 1,
                Note::WireError { .. } => m.wire_errors += 1,
                _ => {}
            },
            _ => {}
        }
        // Per deployment: active claims and ready backups.
        let mut per_dep: BTreeMap<&str, (u32, bool, u32)> = BTreeMap::new();
        for (n, (r, d)) in &role {
            let e = per_dep.entry(d).or_default();
            match r {
                NodeRole::ActiveVpc => {
                    e.0 += 1;
                    e.1 |= handover_nodes.contains(n);
                }
                NodeRole::InactiveVpc(_) if ready.contains(n) => e.2 += 1,
                _ => {}
            }
        }
        double_now = per_dep.values().any(|(actives, handover, _)| *actives > 2 || (*actives == 2 && !handover));
        let ready_backups = per_dep.values().map(|e| e.2).min().unwrap_or(0);
        if ready_backups >= redundancy_target && !per_dep.is_empty() {
            target_reached = true;
        }
        short_now = target_reached && ready_backups < redundancy_target;
    }
    m.failover_detection_us = detections.into_iter().max();
    m.latency = Percentiles::of(&latencies);
    m
}
