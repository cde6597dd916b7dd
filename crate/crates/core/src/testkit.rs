//! Random value generators for codec fuzzing, shared by unit tests and
//! downstream test suites. Enabled with the `testkit` feature.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::hash::Digest256;
use crate::model::{
    ControlData, DeploymentSpec, Epoch, ExecutionMode, NodeDescriptor, NodeId, NodeRole, ProcessData,
    ResourceDemand, SemVer, VpcState, VpfDescriptor,
};
use crate::wire::{
    BackupRequest, DeployCmd, HandoverCmd, Membership, Message, PromoteCmd, PromoteRole, ReleaseAction,
    ReleaseCmd, StatusKind, StatusMessage, SyncAck, SyncMessage, TypeTag,
};

const ADDR_MASK: u64 = 0xFFFF_FFFF_FFFF;

pub fn node<R: Rng>(rng: &mut R) -> NodeId {
    match rng.random_range(0..4) {
        0 => NodeId(0),
        1 => NodeId(ADDR_MASK),
        _ => NodeId(rng.random::<u64>() & ADDR_MASK),
    }
}

pub fn u64_edge<R: Rng>(rng: &mut R) -> u64 {
    match rng.random_range(0..5) {
        0 => 0,
        1 => u64::MAX,
        2 => rng.random_range(0..1000),
        _ => rng.random(),
    }
}

/// Finite, including signed zero, subnormals and extremes.
pub fn scalar<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..6) {
        0 => 0.0,
        1 => -0.0,
        2 => f64::MIN_POSITIVE / 2.0,
        3 => f64::MAX,
        _ => loop {
            let v = f64::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        },
    }
}

pub fn string<R: Rng>(rng: &mut R, max: usize) -> String {
    const ALPHABET: &[char] = &['a', 'z', '0', '-', '_', '.', 'é', 'λ', '控', '🦀'];
    let n = rng.random_range(0..=max);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

pub fn blob<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random()).collect()
}

fn digest<R: Rng>(rng: &mut R) -> Digest256 {
    Digest256(rng.random())
}

fn version<R: Rng>(rng: &mut R) -> SemVer {
    SemVer::new(rng.random(), rng.random(), rng.random())
}

pub fn role<R: Rng>(rng: &mut R) -> NodeRole {
    match rng.random_range(0..4) {
        0 => NodeRole::IdleResource,
        1 => NodeRole::InactiveVpc(rng.random()),
        2 => NodeRole::ActiveVpc,
        _ => NodeRole::Disabled,
    }
}

fn scalar_map<R: Rng>(rng: &mut R) -> BTreeMap<String, f64> {
    (0..rng.random_range(0..5)).map(|i| (format!("{}{i}", string(rng, 4)), scalar(rng))).collect()
}

fn members<R: Rng>(rng: &mut R) -> Membership {
    Membership {
        active: node(rng),
        inactive: (0..rng.random_range(0..4)).map(|_| (node(rng), rng.random())).collect(),
        followers: (0..rng.random_range(0..3)).map(|_| node(rng)).collect(),
    }
}

fn vpf<R: Rng>(rng: &mut R) -> VpfDescriptor {
    VpfDescriptor {
        vpf_id: string(rng, 8),
        version: version(rng),
        execution_mode: if rng.random() {
            ExecutionMode::Cyclic { period: u64_edge(rng) }
        } else {
            ExecutionMode::Acyclic
        },
        logic_name: string(rng, 8),
        state_schema_id: string(rng, 8),
        artifact_digest: digest(rng),
    }
}

fn spec<R: Rng>(rng: &mut R) -> DeploymentSpec {
    DeploymentSpec {
        deployment_id: string(rng, 12),
        vpfs: (0..rng.random_range(0..3)).map(|_| vpf(rng)).collect(),
        redundancy_count: rng.random(),
        sync_period: u64_edge(rng),
        miss_threshold: rng.random(),
        control_period: u64_edge(rng),
        snapshot_every: rng.random(),
        resources: ResourceDemand { cpu: rng.random(), mem: rng.random() },
    }
}

fn state<R: Rng>(rng: &mut R) -> VpcState {
    VpcState {
        seq: u64_edge(rng),
        vpf_states: (0..rng.random_range(0..4)).map(|i| (format!("{}{i}", string(rng, 6)), blob(rng, 40))).collect(),
    }
}

fn opt<R: Rng, T>(rng: &mut R, f: impl FnOnce(&mut R) -> T) -> Option<T> {
    if rng.random() {
        Some(f(rng))
    } else {
        None
    }
}

/// A random message of the given variant. Every field is exercised,
/// including boundary values.
pub fn message<R: Rng>(rng: &mut R, tag: TypeTag) -> Message {
    match tag {
        TypeTag::Discovery => Message::Discovery { round: u64_edge(rng) },
        TypeTag::Register => Message::Register(NodeDescriptor {
            node_id: node(rng),
            cpu_capacity: rng.random(),
            mem_capacity: rng.random(),
            link_latency_estimate: u64_edge(rng),
            role: role(rng),
            last_seen: u64_edge(rng),
            epoch: Epoch(u64_edge(rng)),
        }),
        TypeTag::DeployCmd => Message::DeployCmd(DeployCmd {
            deployment_id: string(rng, 12),
            epoch: Epoch(u64_edge(rng)),
            members: members(rng),
        }),
        TypeTag::PromoteCmd => Message::PromoteCmd(PromoteCmd {
            deployment_id: string(rng, 12),
            role: if rng.random() { PromoteRole::Active } else { PromoteRole::Inactive(rng.random()) },
            epoch: Epoch(u64_edge(rng)),
            spec: spec(rng),
            members: members(rng),
            handover_at: opt(rng, u64_edge),
            state_source: opt(rng, |r| NodeId(u64_edge(r))),
        }),
        TypeTag::Sync => Message::Sync(SyncMessage {
            deployment_id: string(rng, 12),
            epoch: Epoch(u64_edge(rng)),
            slot: u64_edge(rng),
            sent_at: u64_edge(rng),
            seq: u64_edge(rng),
            input_hint: u64_edge(rng),
            state_digest: digest(rng),
            snapshot: opt(rng, state),
        }),
        TypeTag::SyncAck => Message::SyncAck(SyncAck {
            deployment_id: string(rng, 12),
            epoch: Epoch(u64_edge(rng)),
            slot: u64_edge(rng),
            seq: u64_edge(rng),
            in_sync: rng.random(),
        }),
        TypeTag::Status => Message::Status(StatusMessage {
            node_id: NodeId(u64_edge(rng)),
            deployment_id: string(rng, 12),
            role: role(rng),
            epoch: Epoch(u64_edge(rng)),
            seq: u64_edge(rng),
            round: u64_edge(rng),
            kind: match rng.random_range(0..5) {
                0 => StatusKind::Report,
                1 => StatusKind::Ready,
                2 => StatusKind::InSync,
                3 => StatusKind::Fault,
                _ => StatusKind::Promoted,
            },
        }),
        TypeTag::ProcessData => Message::ProcessData(ProcessData {
            deployment_id: string(rng, 12),
            seq_hint: u64_edge(rng),
            inputs: scalar_map(rng),
            timestamp: u64_edge(rng),
        }),
        TypeTag::ControlData => Message::ControlData(ControlData {
            deployment_id: string(rng, 12),
            epoch: Epoch(u64_edge(rng)),
            seq: u64_edge(rng),
            outputs: scalar_map(rng),
        }),
        TypeTag::BackupRequest => Message::BackupRequest(BackupRequest {
            deployment_id: string(rng, 12),
            epoch: Epoch(u64_edge(rng)),
            failed: opt(rng, |r| NodeId(u64_edge(r))),
        }),
        TypeTag::HandoverCmd => Message::HandoverCmd(HandoverCmd {
            deployment_id: string(rng, 12),
            handover_time: u64_edge(rng),
            old_active: NodeId(u64_edge(rng)),
            new_active: NodeId(u64_edge(rng)),
            new_epoch: Epoch(u64_edge(rng)),
        }),
        TypeTag::ReleaseCmd => Message::ReleaseCmd(ReleaseCmd {
            deployment_id: string(rng, 12),
            action: if rng.random() { ReleaseAction::Release } else { ReleaseAction::Disable },
        }),
        TypeTag::FetchVpf => Message::FetchVpf { vpf_id: string(rng, 12), version: version(rng) },
        TypeTag::VpfBlob => Message::VpfBlob {
            vpf_id: string(rng, 12),
            version: version(rng),
            blob: opt(rng, |r| blob(r, 300)),
        },
    }
}
