//! Domain types shared by every part of the framework, the node role state
//! machine, replicated controller state and actuator-side epoch fencing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{Digest256, Hasher};

/// Logical time in integer microseconds.
pub type Micros = u64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    /// All-ones 48-bit link address.
    pub const BROADCAST: NodeId = NodeId(0xFFFF_FFFF_FFFF);
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Promotion counter. The pair (epoch, seq) orders every actuator output.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Epoch(pub u64);

impl Epoch {
    pub fn next(self) -> Epoch {
        Epoch(self.0 + 1)
    }
}

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "role", content = "rank")]
pub enum NodeRole {
    IdleResource,
    /// Backup controller. Rank 0 is the predefined successor of the active.
    InactiveVpc(u8),
    ActiveVpc,
    /// Terminal until the node restarts.
    Disabled,
}

impl NodeRole {
    pub fn is_promoted(self) -> bool {
        matches!(self, NodeRole::InactiveVpc(_) | NodeRole::ActiveVpc)
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRole::IdleResource => f.write_str("idle"),
            NodeRole::InactiveVpc(rank) => write!(f, "inactive[{rank}]"),
            NodeRole::ActiveVpc => f.write_str("active"),
            NodeRole::Disabled => f.write_str("disabled"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleEvent {
    PromoteInactive(u8),
    PromoteActive(Epoch),
    /// Self-initiated step back to an idle resource (fault, aborted startup).
    Demote,
    Disable,
    /// Orchestrator-initiated return to the idle pool.
    Release,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum RoleError {
    #[error("illegal transition: {event:?} in role {role}")]
    IllegalTransition { role: NodeRole, event: RoleEvent },
}

/// Applies `event` to `role`. Total over all pairs; anything outside the
/// legal table is an [`RoleError::IllegalTransition`].
pub fn transition(role: NodeRole, event: RoleEvent) -> Result<NodeRole, RoleError> {
    use NodeRole::*;
    use RoleEvent::*;
    match (role, event) {
        (IdleResource, PromoteInactive(rank)) => Ok(InactiveVpc(rank)),
        (IdleResource | InactiveVpc(_), PromoteActive(_)) => Ok(ActiveVpc),
        (InactiveVpc(_) | ActiveVpc, Release | Demote) => Ok(IdleResource),
        (ActiveVpc, Disable) => Ok(Disabled),
        (role, event) => Err(RoleError::IllegalTransition { role, event }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    /// Milli-cores.
    pub cpu_capacity: u32,
    /// MiB.
    pub mem_capacity: u32,
    pub link_latency_estimate: Micros,
    pub role: NodeRole,
    pub last_seen: Micros,
    pub epoch: Epoch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemVer {
    pub major: u16,
    pub minor: u16,
    pub patch: u16,
}

impl SemVer {
    pub const fn new(major: u16, minor: u16, patch: u16) -> Self {
        SemVer { major, minor, patch }
    }

    pub fn parse(s: &str) -> Option<SemVer> {
        let mut parts = s.trim().split('.');
        let v = SemVer {
            major: parts.next()?.parse().ok()?,
            minor: parts.next()?.parse().ok()?,
            patch: parts.next()?.parse().ok()?,
        };
        parts.next().is_none().then_some(v)
    }
}

impl fmt::Display for SemVer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Cyclic { period: Micros },
    Acyclic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpfDescriptor {
    pub vpf_id: String,
    pub version: SemVer,
    pub execution_mode: ExecutionMode,
    /// Name of the built-in step function, see [`crate::runtime::vpf`].
    pub logic_name: String,
    pub state_schema_id: String,
    pub artifact_digest: Digest256,
}

/// Minimum free capacity an idle resource must advertise to host a VPC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceDemand {
    pub cpu: u32,
    pub mem: u32,
}

impl Default for ResourceDemand {
    fn default() -> Self {
        ResourceDemand { cpu: 1, mem: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentSpec {
    pub deployment_id: String,
    pub vpfs: Vec<VpfDescriptor>,
    /// Number of inactive backups.
    pub redundancy_count: u8,
    pub sync_period: Micros,
    pub miss_threshold: u32,
    pub control_period: Micros,
    /// A full snapshot rides on every N-th sync message.
    pub snapshot_every: u32,
    #[serde(default)]
    pub resources: ResourceDemand,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("miss_threshold must be at least 1")]
    MissThreshold,
    #[error("sync_period must be positive")]
    SyncPeriod,
    #[error("control_period must be positive")]
    ControlPeriod,
    #[error("snapshot_every must be at least 1")]
    SnapshotEvery,
    #[error("vpf {0} has a zero cyclic period")]
    CyclicPeriod(String),
    #[error("duplicate vpf id {0}")]
    DuplicateVpf(String),
}

impl DeploymentSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.miss_threshold < 1 {
            return Err(SpecError::MissThreshold);
        }
        if self.sync_period == 0 {
            return Err(SpecError::SyncPeriod);
        }
        if self.control_period == 0 {
            return Err(SpecError::ControlPeriod);
        }
        if self.snapshot_every < 1 {
            return Err(SpecError::SnapshotEvery);
        }
        for (i, vpf) in self.vpfs.iter().enumerate() {
            if vpf.execution_mode == (ExecutionMode::Cyclic { period: 0 }) {
                return Err(SpecError::CyclicPeriod(vpf.vpf_id.clone()));
            }
            if self.vpfs[..i].iter().any(|o| o.vpf_id == vpf.vpf_id) {
                return Err(SpecError::DuplicateVpf(vpf.vpf_id.clone()));
            }
        }
        Ok(())
    }
}

/// Replicated controller state. The framework never interprets the blobs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpcState {
    pub seq: u64,
    pub vpf_states: BTreeMap<String, Vec<u8>>,
}

/// Canonical digest over `seq` and every VPF state in id order.
pub fn state_digest(state: &VpcState) -> Digest256 {
    let mut h = Hasher::new();
    h.update(b"vpc-state/1").u64(state.seq).u64(state.vpf_states.len() as u64);
    for (id, blob) in &state.vpf_states {
        h.bytes(id.as_bytes()).bytes(blob);
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlData {
    pub deployment_id: String,
    pub epoch: Epoch,
    pub seq: u64,
    pub outputs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessData {
    pub deployment_id: String,
    pub seq_hint: u64,
    pub inputs: BTreeMap<String, f64>,
    pub timestamp: Micros,
}

/// True iff `incoming` is strictly after `last_seen` in (epoch, seq) order.
pub fn fence_accepts(last_seen: (Epoch, u64), incoming: (Epoch, u64)) -> bool {
    incoming > last_seen
}

/// Actuator-side guard: remembers the newest accepted (epoch, seq).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fence {
    last: Option<(Epoch, u64)>,
}

impl Fence {
    pub fn last(&self) -> Option<(Epoch, u64)> {
        self.last
    }

    /// Accepts and records `incoming` if it passes the fence.
    pub fn offer(&mut self, incoming: (Epoch, u64)) -> bool {
        let ok = self.last.is_none_or(|last| fence_accepts(last, incoming));
        if ok {
            self.last = Some(incoming);
        }
        ok
    }
}

/// Network and clock bounds a node plans its timeouts against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingBudget {
    pub jitter_max: Micros,
    pub clock_accuracy: Micros,
    /// Largest base link latency.
    pub max_link_latency: Micros,
}

impl Default for TimingBudget {
    fn default() -> Self {
        TimingBudget { jitter_max: 50, clock_accuracy: 1, max_link_latency: 100 }
    }
}

impl TimingBudget {
    /// Worst one-way delivery time.
    pub fn one_way(&self) -> Micros {
        self.max_link_latency + self.jitter_max
    }

    /// Silence after the last sync's send stamp before an inactive declares
    /// the active failed: `k` periods trimmed by jitter and clock error,
    /// but never so short that one on-time sync could be mistaken for a
    /// missing one.
    pub fn failure_timeout(&self, sync_period: Micros, miss_threshold: u32) -> Micros {
        let nominal = (sync_period * Micros::from(miss_threshold)).saturating_sub(self.jitter_max + self.clock_accuracy);
        let floor = sync_period + self.max_link_latency + 2 * self.jitter_max + 3 * self.clock_accuracy + 1;
        nominal.max(floor)
    }
}
