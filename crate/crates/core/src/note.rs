//! Records components write into the trace. The harness checker and the
//! metrics are computed from these plus the raw frame events.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::Digest256;
use crate::model::{Epoch, Micros, NodeId, NodeRole};
use crate::wire::Membership;

/// One placement input row, kept so placement can be re-checked offline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub node: NodeId,
    pub cpu: u32,
    pub mem: u32,
    pub latency: Micros,
    /// False if excluded or short on capacity; still counts toward maxima.
    pub eligible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Active,
    Inactive,
    Backup,
    RedeployActive,
    RedeployInactive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum Note {
    // --- any node ---
    WireError { peer: NodeId, error: String },

    // --- orchestrator ---
    DiscoverySent { round: u64, targets: u32 },
    IrRegistered { node: NodeId, fresh: bool },
    IrRejected { node: NodeId, role: NodeRole },
    IrFailed { node: NodeId, last_seen: Micros },
    IrReinstated { node: NodeId },
    Selected { deployment: String, purpose: Purpose, pool: Vec<Candidate>, chosen: Option<NodeId> },
    DeployStarted { deployment: String, epoch: Epoch, members: Membership },
    DeployRejected { deployment: String, reason: String },
    PromoteIssued { deployment: String, node: NodeId, role: NodeRole, epoch: Epoch },
    MembersUpdated { deployment: String, epoch: Epoch, members: Membership },
    DeploymentReady { deployment: String },
    /// Count of ready backups changed.
    Redundancy { deployment: String, ready: u32, target: u32 },
    DegradedRedundancy { deployment: String, missing: u32 },
    BackupRequestHandled { deployment: String, from: NodeId, epoch: Epoch, failed: Option<NodeId> },
    StaleEpoch { deployment: String, from: NodeId, epoch: Epoch, current: Epoch },
    ActiveAdopted { deployment: String, node: NodeId, epoch: Epoch },
    DoubleActive { deployment: String, a: NodeId, a_epoch: Epoch, b: NodeId, b_epoch: Epoch },
    DisableIssued { deployment: String, node: NodeId, epoch: Epoch },
    HandoverScheduled { deployment: String, at: Micros, old_active: NodeId, new_active: NodeId, epoch: Epoch },
    HandoverCommitted { deployment: String, at: Micros },
    HandoverAborted { deployment: String, reason: String },
    ReleaseIssued { deployment: String, node: NodeId },
    DeploymentFailed { deployment: String, reason: String },

    // --- node runtime ---
    RoleChanged { deployment: String, from: NodeRole, to: NodeRole, epoch: Epoch, handover: bool },
    RankChanged { deployment: String, rank: u8 },
    EpochRaised { deployment: String, epoch: Epoch },
    IllegalTransition { from: NodeRole, cmd: String },
    FetchRequested { vpf_id: String },
    VpfVerified { vpf_id: String },
    DigestMismatch { vpf_id: String },
    VpfFault { reason: String },
    Ready { deployment: String },
    Executed { deployment: String, seq: u64, hint: u64, digest: Digest256 },
    ControlEmitted { deployment: String, epoch: Epoch, seq: u64, sample_ts: Micros },
    SnapshotAdopted { deployment: String, seq: u64, from: NodeId },
    InSync { deployment: String, seq: u64 },
    SyncDiverged { deployment: String, seq: u64 },
    PeerFailed { deployment: String, peer: NodeId, missed: u32 },
    BackupRequestSent { deployment: String, epoch: Epoch, failed: Option<NodeId> },
    ActiveFailed { deployment: String, active: NodeId, rank: u8 },
    SelfPromoted { deployment: String, epoch: Epoch, seq: u64 },
    HandoverArmed { deployment: String, at: Micros, role: NodeRole },
    HandoverInPast { deployment: String, at: Micros },
    /// A command named a deployment this node does not serve.
    UnknownDeployment { deployment: String, cmd: String },
    Released { deployment: String },
    Disabled { deployment: String, epoch: Epoch },

    // --- registry ---
    VpfServed { to: NodeId, vpf_id: String, found: bool },

    // --- sensor/actuator endpoint ---
    Sampled { deployment: String, hint: u64, ts: Micros },
    Accepted { deployment: String, from: NodeId, epoch: Epoch, seq: u64 },
    Rejected { deployment: String, from: NodeId, epoch: Epoch, seq: u64 },
}
