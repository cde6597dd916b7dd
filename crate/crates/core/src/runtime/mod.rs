//! Per-node state machine: idle-resource agent, VPC control loop, state
//! synchronization, failure detection, self-promotion and scheduled
//! handover.
//!
//! A node is idle until the orchestrator promotes it. A promoted node
//! fetches its VPFs from the registry, verifies them, then executes every
//! process sample it receives. Only the active node sends control data;
//! backups execute the same samples and compare state digests with the
//! active's periodic sync messages, adopting a full snapshot whenever they
//! fall out of step.

pub mod vpf;

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::Digest256;
use crate::model::{
    state_digest, transition, ControlData, DeploymentSpec, Epoch, Micros, NodeDescriptor, NodeId, NodeRole,
    ProcessData, RoleEvent, TimingBudget, VpcState, VpfDescriptor,
};
use crate::note::Note;
use crate::simnet::Ctx;
use crate::transport::{self, FramePolicy};
use crate::wire::{
    BackupRequest, DeployCmd, HandoverCmd, Membership, Message, PromoteCmd, PromoteRole, ReleaseAction, ReleaseCmd,
    StatusKind, StatusMessage, SyncAck, SyncMessage,
};

use vpf::LoadedVpf;

const TIMER_SYNC: u64 = 1;
const TIMER_DEADLINE: u64 = 2;

/// Digests kept for comparing against syncs that lag local execution.
const HISTORY: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeParams {
    pub node_id: NodeId,
    pub cpu_capacity: u32,
    pub mem_capacity: u32,
    pub link_latency_estimate: Micros,
    pub vpcmo: NodeId,
    pub registry: NodeId,
    pub icps: NodeId,
    pub policy: FramePolicy,
    pub timing: TimingBudget,
    /// Samples held while waiting for a snapshot.
    pub buffer_cap: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct PeerTrack {
    last_ack_slot: u64,
    needs_snapshot: bool,
    failed: bool,
    /// Receives state but is not a backup of this node.
    follower: bool,
}

#[derive(Clone, Debug)]
struct Deployment {
    spec: DeploymentSpec,
    members: Membership,
    /// Emission epoch when active; the active's epoch when inactive.
    epoch: Epoch,
    promote_epoch: Epoch,
    promote_role: PromoteRole,
    pending: BTreeMap<String, VpfDescriptor>,
    fetched: BTreeMap<String, LoadedVpf>,
    vpfs: Vec<LoadedVpf>,
    loaded: bool,
    state: VpcState,
    last_hint: u64,
    /// State known to match the deployment's authoritative replica.
    synced: bool,
    reported_in_sync: bool,
    buffer: VecDeque<ProcessData>,
    history: VecDeque<(u64, Digest256)>,
    /// A sync digest for a seq not yet executed here.
    pending_check: Option<(u64, Digest256)>,
    last_output: Option<(u64, Micros, BTreeMap<String, f64>)>,
    emitting: bool,
    emit_from: Option<Micros>,
    emit_until: Option<Micros>,
    slot: u64,
    peers: BTreeMap<NodeId, PeerTrack>,
    sync_source: Option<NodeId>,
    handover_at: Option<Micros>,
}

impl Deployment {
    fn id(&self) -> &str {
        &self.spec.deployment_id
    }
}

/// JSON-friendly snapshot for status queries and final trace states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node_id: NodeId,
    pub role: NodeRole,
    pub deployment: Option<String>,
    pub epoch: Epoch,
    pub seq: u64,
    pub synced: bool,
}

#[derive(Clone, Debug)]
pub struct NodeRuntime {
    params: NodeParams,
    role: NodeRole,
    last_epoch: Epoch,
    dep: Option<Deployment>,
}

impl NodeRuntime {
    pub fn new(params: NodeParams) -> Self {
        NodeRuntime { params, role: NodeRole::IdleResource, last_epoch: Epoch(0), dep: None }
    }

    pub fn params(&self) -> &NodeParams {
        &self.params
    }

    pub fn role(&self) -> NodeRole {
        self.role
    }

    pub fn state(&self) -> Option<&VpcState> {
        self.dep.as_ref().map(|d| &d.state)
    }

    pub fn status(&self) -> NodeStatus {
        NodeStatus {
            node_id: self.params.node_id,
            role: self.role,
            deployment: self.dep.as_ref().map(|d| d.id().to_string()),
            epoch: self.dep.as_ref().map_or(self.last_epoch, |d| d.epoch),
            seq: self.dep.as_ref().map_or(0, |d| d.state.seq),
            synced: self.dep.as_ref().is_some_and(|d| d.synced),
        }
    }

    pub fn descriptor(&self, now: Micros) -> NodeDescriptor {
        NodeDescriptor {
            node_id: self.params.node_id,
            cpu_capacity: self.params.cpu_capacity,
            mem_capacity: self.params.mem_capacity,
            link_latency_estimate: self.params.link_latency_estimate,
            role: self.role,
            last_seen: now,
            epoch: self.last_epoch,
        }
    }

    /// Boot: announce as an idle resource.
    pub fn start(&mut self, ctx: &mut Ctx<'_, Note>) {
        let desc = self.descriptor(ctx.local_now());
        self.send(ctx, self.params.vpcmo, &Message::Register(desc));
    }

    /// Back to the boot state; also the only way out of `Disabled`.
    pub fn restart(&mut self) {
        self.role = NodeRole::IdleResource;
        self.dep = None;
    }

    fn send(&self, ctx: &mut Ctx<'_, Note>, dst: NodeId, msg: &Message) {
        transport::send(ctx, &self.params.policy, dst, msg);
    }

    fn status_msg(&self, kind: StatusKind, round: u64) -> Message {
        let s = self.status();
        Message::Status(StatusMessage {
            node_id: s.node_id,
            deployment_id: s.deployment.unwrap_or_default(),
            role: s.role,
            epoch: s.epoch,
            seq: s.seq,
            round,
            kind,
        })
    }

    fn report(&self, ctx: &mut Ctx<'_, Note>, kind: StatusKind) {
        let msg = self.status_msg(kind, 0);
        self.send(ctx, self.params.vpcmo, &msg);
    }

    fn set_role(&mut self, ctx: &mut Ctx<'_, Note>, event: RoleEvent) -> bool {
        match transition(self.role, event) {
            Ok(to) => {
                let (deployment, epoch, handover) = match &self.dep {
                    Some(d) => (d.id().to_string(), d.epoch, d.handover_at.is_some()),
                    None => (String::new(), self.last_epoch, false),
                };
                ctx.note(Note::RoleChanged { deployment, from: self.role, to, epoch, handover });
                self.role = to;
                true
            }
            Err(_) => {
                ctx.note(Note::IllegalTransition { from: self.role, cmd: format!("{event:?}") });
                false
            }
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, msg: Message) {
        match msg {
            Message::Discovery { round } => self.on_discovery(ctx, src, round),
            Message::PromoteCmd(cmd) => self.on_promote(ctx, cmd),
            Message::DeployCmd(cmd) => self.on_deploy(ctx, cmd),
            Message::VpfBlob { vpf_id, version, blob } => self.on_blob(ctx, vpf_id, version, blob),
            Message::ProcessData(p) => self.on_sample(ctx, p),
            Message::Sync(s) => self.on_sync(ctx, src, s),
            Message::SyncAck(a) => self.on_ack(src, a),
            Message::HandoverCmd(h) => self.on_handover(ctx, h),
            Message::ReleaseCmd(r) => self.on_release(ctx, r),
            _ => {}
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, key: u64) {
        match key {
            TIMER_SYNC => self.sync_tick(ctx),
            TIMER_DEADLINE => self.on_deadline(ctx),
            _ => {}
        }
    }

    fn on_discovery(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, round: u64) {
        match self.role {
            NodeRole::IdleResource => {
                let desc = self.descriptor(ctx.local_now());
                self.send(ctx, src, &Message::Register(desc));
            }
            NodeRole::InactiveVpc(_) | NodeRole::ActiveVpc => {
                let msg = self.status_msg(StatusKind::Report, round);
                self.send(ctx, src, &msg);
            }
            NodeRole::Disabled => {}
        }
    }

    fn on_promote(&mut self, ctx: &mut Ctx<'_, Note>, cmd: PromoteCmd) {
        if let Some(d) = &self.dep {
            if d.id() == cmd.deployment_id && d.promote_epoch == cmd.epoch && d.promote_role == cmd.role {
                // Replay: answer again, fetch nothing.
                if d.loaded {
                    self.report(ctx, StatusKind::Ready);
                }
                return;
            }
        }
        let event = match cmd.role {
            PromoteRole::Active => RoleEvent::PromoteActive(cmd.epoch),
            PromoteRole::Inactive(rank) => RoleEvent::PromoteInactive(rank),
        };
        if transition(self.role, event).is_err() {
            ctx.note(Note::IllegalTransition { from: self.role, cmd: format!("{event:?}") });
            return;
        }
        let me = self.params.node_id;
        let inactive = matches!(cmd.role, PromoteRole::Inactive(_));
        let mut dep = Deployment {
            members: cmd.members.clone(),
            epoch: cmd.epoch,
            promote_epoch: cmd.epoch,
            promote_role: cmd.role,
            pending: cmd.spec.vpfs.iter().map(|v| (v.vpf_id.clone(), v.clone())).collect(),
            fetched: BTreeMap::new(),
            vpfs: Vec::new(),
            loaded: false,
            state: VpcState::default(),
            last_hint: 0,
            synced: !inactive && cmd.state_source.is_none(),
            reported_in_sync: false,
            buffer: VecDeque::new(),
            history: VecDeque::new(),
            pending_check: None,
            last_output: None,
            emitting: !inactive && cmd.handover_at.is_none(),
            emit_from: None,
            emit_until: None,
            slot: 0,
            peers: BTreeMap::new(),
            sync_source: if inactive { Some(cmd.members.active) } else { cmd.state_source },
            handover_at: cmd.handover_at,
            spec: cmd.spec,
        };
        if !inactive {
            dep.peers = backup_peers(&dep.members, me, 0);
        }
        self.dep = Some(dep);
        self.set_role(ctx, event);
        self.last_epoch = self.last_epoch.max(cmd.epoch);
        if let Some(at) = cmd.handover_at {
            ctx.note(Note::HandoverArmed { deployment: cmd.deployment_id, at, role: self.role });
        }
        let fetches: Vec<(String, crate::model::SemVer)> =
            self.dep.as_ref().unwrap().pending.values().map(|v| (v.vpf_id.clone(), v.version)).collect();
        for (vpf_id, version) in fetches {
            ctx.note(Note::FetchRequested { vpf_id: vpf_id.clone() });
            self.send(ctx, self.params.registry, &Message::FetchVpf { vpf_id, version });
        }
        if self.dep.as_ref().unwrap().pending.is_empty() {
            self.finish_loading(ctx);
        }
    }

    fn on_blob(&mut self, ctx: &mut Ctx<'_, Note>, vpf_id: String, version: crate::model::SemVer, blob: Option<Vec<u8>>) {
        let Some(dep) = self.dep.as_mut() else { return };
        let Some(desc) = dep.pending.get(&vpf_id).filter(|d| d.version == version).cloned() else { return };
        let Some(blob) = blob else {
            return self.abort_promotion(ctx, Note::VpfFault { reason: format!("artifact {vpf_id} {version} not found") });
        };
        if Digest256::of(&blob) != desc.artifact_digest {
            return self.abort_promotion(ctx, Note::DigestMismatch { vpf_id });
        }
        match vpf::load(&desc, &blob) {
            Ok(loaded) => {
                dep.pending.remove(&vpf_id);
                dep.fetched.insert(vpf_id.clone(), loaded);
                ctx.note(Note::VpfVerified { vpf_id });
                if dep.pending.is_empty() {
                    self.finish_loading(ctx);
                }
            }
            Err(e) => self.abort_promotion(ctx, Note::VpfFault { reason: e.to_string() }),
        }
    }

    fn abort_promotion(&mut self, ctx: &mut Ctx<'_, Note>, why: Note) {
        ctx.note(why);
        self.fail_stop(ctx);
    }

    /// Fail-stop: step back to idle and tell the orchestrator.
    fn fail_stop(&mut self, ctx: &mut Ctx<'_, Note>) {
        self.report(ctx, StatusKind::Fault);
        self.set_role(ctx, RoleEvent::Demote);
        self.dep = None;
        ctx.cancel_timer(TIMER_SYNC);
        ctx.cancel_timer(TIMER_DEADLINE);
    }

    fn finish_loading(&mut self, ctx: &mut Ctx<'_, Note>) {
        let dep = self.dep.as_mut().unwrap();
        let mut vpfs = Vec::new();
        for v in &dep.spec.vpfs {
            vpfs.push(dep.fetched.remove(&v.vpf_id).expect("all fetched"));
        }
        dep.state = VpcState { seq: 0, vpf_states: vpfs.iter().map(|v| (v.desc.vpf_id.clone(), v.initial_state())).collect() };
        dep.vpfs = vpfs;
        dep.loaded = true;
        let (id, spec_t) = (dep.id().to_string(), dep.spec.sync_period);
        ctx.note(Note::Ready { deployment: id });
        self.report(ctx, StatusKind::Ready);
        match self.role {
            NodeRole::ActiveVpc => ctx.set_timer_after(TIMER_SYNC, spec_t),
            NodeRole::InactiveVpc(_) => {
                let timeout = self.failure_timeout();
                ctx.set_timer_after(TIMER_DEADLINE, timeout + spec_t);
            }
            _ => {}
        }
    }

    fn failure_timeout(&self) -> Micros {
        let spec = &self.dep.as_ref().unwrap().spec;
        self.params.timing.failure_timeout(spec.sync_period, spec.miss_threshold)
    }

    fn on_deploy(&mut self, ctx: &mut Ctx<'_, Note>, cmd: DeployCmd) {
        let me = self.params.node_id;
        let role = self.role;
        let Some(dep) = self.dep.as_mut().filter(|d| d.id() == cmd.deployment_id) else { return };
        let id = cmd.deployment_id.clone();
        match role {
            NodeRole::ActiveVpc => {
                if cmd.members.active != me {
                    return;
                }
                if cmd.epoch > dep.epoch && dep.handover_at.is_none() {
                    dep.epoch = cmd.epoch;
                    self.last_epoch = self.last_epoch.max(cmd.epoch);
                    ctx.note(Note::EpochRaised { deployment: id, epoch: cmd.epoch });
                }
                let fresh = backup_peers(&cmd.members, me, dep.slot);
                let old = core::mem::take(&mut dep.peers);
                dep.peers = fresh
                    .into_iter()
                    .map(|(n, track)| (n, old.get(&n).copied().map(|t| PeerTrack { follower: track.follower, ..t }).unwrap_or(track)))
                    .collect();
                dep.members = cmd.members;
            }
            NodeRole::InactiveVpc(rank) => {
                if cmd.epoch < dep.epoch {
                    return;
                }
                let Some(new_rank) = cmd.members.inactive.iter().find(|(n, _)| *n == me).map(|(_, r)| *r) else { return };
                dep.epoch = cmd.epoch;
                dep.sync_source = Some(cmd.members.active);
                dep.members = cmd.members;
                if new_rank != rank {
                    self.role = NodeRole::InactiveVpc(new_rank);
                    ctx.note(Note::RankChanged { deployment: id, rank: new_rank });
                }
            }
            _ => {}
        }
    }

    fn emits(&self, ts: Micros) -> bool {
        let Some(d) = &self.dep else { return false };
        self.role == NodeRole::ActiveVpc
            && d.emitting
            && d.emit_from.is_none_or(|h| ts >= h)
            && d.emit_until.is_none_or(|h| ts < h)
    }

    fn on_sample(&mut self, ctx: &mut Ctx<'_, Note>, p: ProcessData) {
        if !self.role.is_promoted() {
            return;
        }
        let cap = self.params.buffer_cap;
        let primary = self.role == NodeRole::ActiveVpc && self.dep.as_ref().is_some_and(|d| d.sync_source.is_none());
        let Some(dep) = self.dep.as_mut().filter(|d| d.loaded && d.id() == p.deployment_id) else { return };
        if p.seq_hint <= dep.last_hint {
            return;
        }
        if dep.synced && (p.seq_hint == dep.last_hint + 1 || primary) {
            self.execute(ctx, &p);
        } else {
            if dep.synced {
                dep.synced = false;
                ctx.note(Note::SyncDiverged { deployment: p.deployment_id.clone(), seq: dep.state.seq });
            }
            if dep.buffer.len() == cap {
                dep.buffer.pop_front();
            }
            dep.buffer.push_back(p);
        }
    }

    /// One control cycle over every cyclic VPF in descriptor order.
    fn execute(&mut self, ctx: &mut Ctx<'_, Note>, p: &ProcessData) {
        let dep = self.dep.as_mut().unwrap();
        let mut channels = p.inputs.clone();
        let mut outputs = BTreeMap::new();
        let mut next = dep.state.vpf_states.clone();
        for v in dep.vpfs.iter().filter(|v| v.is_cyclic()) {
            let state = next.get(&v.desc.vpf_id).map(Vec::as_slice).unwrap_or(&[]);
            match v.step(state, &channels) {
                Ok((s, out)) => {
                    next.insert(v.desc.vpf_id.clone(), s);
                    channels.insert(v.output.clone(), out);
                    outputs.insert(v.output.clone(), out);
                }
                Err(e) => {
                    ctx.note(Note::VpfFault { reason: e.to_string() });
                    return self.fail_stop(ctx);
                }
            }
        }
        dep.state = VpcState { seq: dep.state.seq + 1, vpf_states: next };
        dep.last_hint = p.seq_hint;
        let digest = state_digest(&dep.state);
        if dep.history.len() == HISTORY {
            dep.history.pop_front();
        }
        dep.history.push_back((dep.state.seq, digest));
        ctx.note(Note::Executed { deployment: p.deployment_id.clone(), seq: dep.state.seq, hint: p.seq_hint, digest });
        if let Some((seq, want)) = dep.pending_check {
            if seq == dep.state.seq {
                dep.pending_check = None;
                if want != digest {
                    dep.synced = false;
                    ctx.note(Note::SyncDiverged { deployment: p.deployment_id.clone(), seq });
                }
            }
        }
        dep.last_output = Some((dep.state.seq, p.timestamp, outputs));
        if dep.emit_from.is_some_and(|h| dep.emitting && p.timestamp >= h) {
            // Past the handover date this node is the authoritative replica.
            dep.sync_source = None;
        }
        if self.emits(p.timestamp) {
            self.emit(ctx, p.timestamp);
        }
    }

    fn emit(&mut self, ctx: &mut Ctx<'_, Note>, sample_ts: Micros) {
        let dep = self.dep.as_ref().unwrap();
        let Some((seq, _, outputs)) = &dep.last_output else { return };
        let cd = ControlData { deployment_id: dep.id().to_string(), epoch: dep.epoch, seq: *seq, outputs: outputs.clone() };
        ctx.note(Note::ControlEmitted { deployment: cd.deployment_id.clone(), epoch: cd.epoch, seq: cd.seq, sample_ts });
        self.send(ctx, self.params.icps, &Message::ControlData(cd));
    }

    fn sync_tick(&mut self, ctx: &mut Ctx<'_, Note>) {
        if self.role != NodeRole::ActiveVpc {
            return;
        }
        let now = ctx.local_now();
        let dep = self.dep.as_mut().unwrap();
        dep.slot += 1;
        let slot = dep.slot;
        let k = u64::from(dep.spec.miss_threshold);
        let mut failed = Vec::new();
        for (n, p) in dep.peers.iter_mut().filter(|(_, p)| !p.failed) {
            let missed = (slot - 1).saturating_sub(p.last_ack_slot);
            if missed >= k {
                p.failed = true;
                if !p.follower {
                    failed.push((*n, missed as u32));
                }
            }
        }
        let digest = state_digest(&dep.state);
        let periodic = slot % u64::from(dep.spec.snapshot_every) == 0;
        let mut out = Vec::new();
        for (n, p) in dep.peers.iter_mut().filter(|(_, p)| !p.failed) {
            let snapshot = (periodic || p.needs_snapshot).then(|| dep.state.clone());
            p.needs_snapshot = false;
            out.push((
                *n,
                Message::Sync(SyncMessage {
                    deployment_id: dep.spec.deployment_id.clone(),
                    epoch: dep.epoch,
                    slot,
                    sent_at: now,
                    seq: dep.state.seq,
                    input_hint: dep.last_hint,
                    state_digest: digest,
                    snapshot,
                }),
            ));
        }
        let (id, epoch, period) = (dep.id().to_string(), dep.epoch, dep.spec.sync_period);
        for (n, msg) in out {
            self.send(ctx, n, &msg);
        }
        for (peer, missed) in failed {
            ctx.note(Note::PeerFailed { deployment: id.clone(), peer, missed });
            ctx.note(Note::BackupRequestSent { deployment: id.clone(), epoch, failed: Some(peer) });
            let req = BackupRequest { deployment_id: id.clone(), epoch, failed: Some(peer) };
            self.send(ctx, self.params.vpcmo, &Message::BackupRequest(req));
        }
        ctx.set_timer_after(TIMER_SYNC, period);
    }

    fn on_ack(&mut self, src: NodeId, a: SyncAck) {
        let Some(dep) = self.dep.as_mut().filter(|d| d.id() == a.deployment_id) else { return };
        if let Some(p) = dep.peers.get_mut(&src) {
            if !p.failed && a.slot > p.last_ack_slot {
                p.last_ack_slot = a.slot;
                p.needs_snapshot = !a.in_sync;
            }
        }
    }

    fn on_sync(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, s: SyncMessage) {
        let inactive = matches!(self.role, NodeRole::InactiveVpc(_));
        let follower = self.role == NodeRole::ActiveVpc;
        let Some(dep) = self.dep.as_mut().filter(|d| d.loaded && d.id() == s.deployment_id) else { return };
        if inactive {
            if s.epoch < dep.epoch || (s.epoch == dep.epoch && dep.sync_source != Some(src)) {
                return;
            }
            // A higher epoch means a new active took over.
            dep.epoch = s.epoch;
            dep.sync_source = Some(src);
        } else if !(follower && dep.sync_source == Some(src)) {
            return;
        }
        let id = s.deployment_id.clone();
        if let Some(snap) = s.snapshot.as_ref().filter(|_| !dep.synced) {
            if state_digest(snap) == s.state_digest {
                dep.state = snap.clone();
                dep.last_hint = s.input_hint;
                dep.synced = true;
                dep.pending_check = None;
                dep.history.clear();
                dep.history.push_back((snap.seq, s.state_digest));
                ctx.note(Note::SnapshotAdopted { deployment: id.clone(), seq: snap.seq, from: src });
                self.replay(ctx);
            }
        } else if dep.synced {
            match dep.history.iter().find(|(q, _)| *q == s.seq) {
                Some((_, d)) if *d != s.state_digest => {
                    dep.synced = false;
                    ctx.note(Note::SyncDiverged { deployment: id.clone(), seq: s.seq });
                }
                Some(_) => {}
                None if s.seq > dep.state.seq => dep.pending_check = Some((s.seq, s.state_digest)),
                // Too old to compare; treat as diverged so a snapshot follows.
                None => dep.synced = false,
            }
        }
        let dep = self.dep.as_mut().unwrap();
        let ack = SyncAck { deployment_id: id.clone(), epoch: s.epoch, slot: s.slot, seq: dep.state.seq, in_sync: dep.synced };
        let became_in_sync = dep.synced && !dep.reported_in_sync;
        if became_in_sync {
            dep.reported_in_sync = true;
            ctx.note(Note::InSync { deployment: id, seq: dep.state.seq });
        }
        self.send(ctx, src, &Message::SyncAck(ack));
        if became_in_sync {
            self.report(ctx, StatusKind::InSync);
        }
        if inactive {
            let deadline = s.sent_at + self.failure_timeout();
            ctx.set_timer_at_local(TIMER_DEADLINE, deadline);
        }
    }

    /// Runs buffered samples that directly follow the adopted state.
    fn replay(&mut self, ctx: &mut Ctx<'_, Note>) {
        loop {
            let dep = self.dep.as_mut().unwrap();
            while dep.buffer.front().is_some_and(|p| p.seq_hint <= dep.last_hint) {
                dep.buffer.pop_front();
            }
            let Some(p) = dep.buffer.front().cloned() else { return };
            if p.seq_hint != dep.last_hint + 1 {
                dep.synced = false;
                return;
            }
            dep.buffer.pop_front();
            self.execute(ctx, &p);
            if self.dep.is_none() {
                return;
            }
        }
    }

    fn on_deadline(&mut self, ctx: &mut Ctx<'_, Note>) {
        let NodeRole::InactiveVpc(rank) = self.role else { return };
        let dep = self.dep.as_ref().unwrap();
        let (id, active) = (dep.id().to_string(), dep.members.active);
        ctx.note(Note::ActiveFailed { deployment: id, active: dep.sync_source.unwrap_or(active), rank });
        if rank == 0 {
            self.self_promote(ctx);
        }
    }

    fn self_promote(&mut self, ctx: &mut Ctx<'_, Note>) {
        let me = self.params.node_id;
        let epoch = self.dep.as_ref().unwrap().epoch.next();
        let old_active = self.dep.as_ref().unwrap().sync_source;
        self.dep.as_mut().unwrap().epoch = epoch;
        if !self.set_role(ctx, RoleEvent::PromoteActive(epoch)) {
            return;
        }
        self.last_epoch = self.last_epoch.max(epoch);
        let dep = self.dep.as_mut().unwrap();
        dep.emitting = true;
        dep.sync_source = None;
        dep.synced = true;
        dep.members.inactive.retain(|(n, _)| *n != me);
        if let Some(old) = old_active {
            dep.members.followers.retain(|n| *n != old);
        }
        dep.members.active = me;
        dep.peers = backup_peers(&dep.members, me, dep.slot);
        let (id, seq, period) = (dep.id().to_string(), dep.state.seq, dep.spec.sync_period);
        let ts = dep.last_output.as_ref().map(|(_, ts, _)| *ts);
        ctx.note(Note::SelfPromoted { deployment: id.clone(), epoch, seq });
        // Re-issue the latest output under the new epoch so the actuator
        // hears from the new active without waiting for the next sample.
        if let Some(ts) = ts {
            self.emit(ctx, ts);
        }
        self.report(ctx, StatusKind::Promoted);
        ctx.note(Note::BackupRequestSent { deployment: id.clone(), epoch, failed: old_active });
        let req = BackupRequest { deployment_id: id, epoch, failed: old_active };
        self.send(ctx, self.params.vpcmo, &Message::BackupRequest(req));
        ctx.set_timer_after(TIMER_SYNC, period);
    }

    fn on_handover(&mut self, ctx: &mut Ctx<'_, Note>, h: HandoverCmd) {
        let me = self.params.node_id;
        let now = ctx.local_now();
        let Some(dep) = self.dep.as_mut().filter(|d| d.id() == h.deployment_id) else {
            ctx.note(Note::UnknownDeployment { deployment: h.deployment_id, cmd: "handover".into() });
            return;
        };
        if h.handover_time <= now {
            ctx.note(Note::HandoverInPast { deployment: h.deployment_id, at: h.handover_time });
            return;
        }
        if self.role != NodeRole::ActiveVpc {
            return;
        }
        if me == h.old_active {
            dep.emit_until = Some(h.handover_time);
        } else if me == h.new_active {
            dep.emitting = true;
            dep.emit_from = Some(h.handover_time);
            dep.epoch = dep.epoch.max(h.new_epoch);
        } else {
            return;
        }
        ctx.note(Note::HandoverArmed { deployment: h.deployment_id, at: h.handover_time, role: NodeRole::ActiveVpc });
    }

    fn on_release(&mut self, ctx: &mut Ctx<'_, Note>, r: ReleaseCmd) {
        if !self.dep.as_ref().is_some_and(|d| d.id() == r.deployment_id) {
            return;
        }
        let id = r.deployment_id;
        match r.action {
            ReleaseAction::Release => {
                if self.set_role(ctx, RoleEvent::Release) {
                    ctx.note(Note::Released { deployment: id });
                    self.dep = None;
                    ctx.cancel_timer(TIMER_SYNC);
                    ctx.cancel_timer(TIMER_DEADLINE);
                    let desc = self.descriptor(ctx.local_now());
                    self.send(ctx, self.params.vpcmo, &Message::Register(desc));
                }
            }
            ReleaseAction::Disable => {
                let epoch = self.dep.as_ref().unwrap().epoch;
                if self.set_role(ctx, RoleEvent::Disable) {
                    ctx.note(Note::Disabled { deployment: id, epoch });
                    ctx.cancel_timer(TIMER_SYNC);
                    ctx.cancel_timer(TIMER_DEADLINE);
                }
            }
        }
    }
}

/// Sync targets of an active: its backups plus followers.
fn backup_peers(m: &Membership, me: NodeId, slot: u64) -> BTreeMap<NodeId, PeerTrack> {
    let fresh = |follower| PeerTrack { last_ack_slot: slot, needs_snapshot: true, failed: false, follower };
    let mut peers: BTreeMap<NodeId, PeerTrack> =
        m.inactive.iter().filter(|(n, _)| *n != me).map(|(n, _)| (*n, fresh(false))).collect();
    for f in m.followers.iter().filter(|n| **n != me) {
        peers.entry(*f).or_insert(fresh(true));
    }
    peers
}
