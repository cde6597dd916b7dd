//! The VPC management and orchestration node (VPCMO).
//!
//! Keeps a registry of idle resources alive with periodic discovery,
//! places deployments, restores redundancy after failures, resolves double
//! actives and drives scheduled handovers. Every decision is a pure
//! function of the messages received so far and the local clock.

pub mod placement;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeploymentSpec, Epoch, Micros, NodeDescriptor, NodeId, NodeRole, ResourceDemand, SpecError, TimingBudget};
use crate::note::{Candidate, Note, Purpose};
use crate::simnet::Ctx;
use crate::transport::{self, FramePolicy};
use crate::wire::{
    BackupRequest, DeployCmd, HandoverCmd, Membership, Message, PromoteCmd, PromoteRole, ReleaseAction, ReleaseCmd,
    StatusKind, StatusMessage,
};

const TIMER_DISCOVERY: u64 = 1;
const TIMER_FIRST_STEP: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum OrchError {
    #[error("node {0} is not idle")]
    NotIdle(NodeId),
    #[error("no suitable idle resource")]
    NoSuitableIr,
    #[error("InsufficientResources: need {needed} idle resources, {available} available")]
    InsufficientResources { needed: u32, available: u32 },
    #[error("HandoverTooSoon: handover at {at} but earliest is after {earliest}")]
    HandoverTooSoon { at: Micros, earliest: Micros },
    #[error("unknown deployment {0}")]
    UnknownDeployment(String),
    #[error("deployment {0} already exists")]
    DuplicateDeployment(String),
    #[error("deployment {0} already has a handover in progress")]
    HandoverInProgress(String),
    #[error("StaleEpoch: request epoch {got} is older than {current}")]
    StaleEpoch { got: Epoch, current: Epoch },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

impl From<SpecError> for OrchError {
    fn from(e: SpecError) -> Self {
        OrchError::InvalidSpec(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub discovery_period: Micros,
    pub ir_miss_threshold: u32,
    /// Expected time for a promoted node to download its VPFs.
    pub fetch_estimate: Micros,
    pub timing: TimingBudget,
    pub icps: NodeId,
    pub policy: FramePolicy,
    /// Nodes that receive discovery broadcasts.
    pub targets: Vec<NodeId>,
}

impl OrchestratorConfig {
    /// Earliest lead time for a handover date: two promotion round trips
    /// plus one sync period for the new active to get a snapshot.
    pub fn startup_margin(&self, spec: &DeploymentSpec) -> Micros {
        2 * (self.timing.one_way() + self.fetch_estimate) + spec.sync_period
    }

    /// How long before the handover date the commit decision is taken,
    /// and after it the obsolete nodes are released.
    pub fn handover_lead(&self) -> Micros {
        2 * (self.timing.one_way() + self.timing.clock_accuracy)
    }

    fn promote_retry(&self) -> Micros {
        5 * self.discovery_period
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrEntry {
    pub desc: NodeDescriptor,
    pub failed: bool,
    /// Deployment the node was promoted into, while the orchestrator
    /// considers it in use.
    pub assigned: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrRegistry {
    pub entries: BTreeMap<NodeId, IrEntry>,
    pub discovery_period: Micros,
    pub ir_miss_threshold: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Registered {
    pub fresh: bool,
    pub reinstated: bool,
}

impl IrRegistry {
    pub fn new(discovery_period: Micros, ir_miss_threshold: u32) -> Self {
        IrRegistry { entries: BTreeMap::new(), discovery_period, ir_miss_threshold }
    }

    pub fn register(&mut self, mut desc: NodeDescriptor, now: Micros) -> Result<Registered, OrchError> {
        if desc.role != NodeRole::IdleResource {
            return Err(OrchError::NotIdle(desc.node_id));
        }
        desc.last_seen = now;
        match self.entries.get_mut(&desc.node_id) {
            Some(e) => {
                let reinstated = e.failed;
                desc.last_seen = desc.last_seen.max(e.desc.last_seen);
                e.desc = desc;
                e.failed = false;
                Ok(Registered { fresh: false, reinstated })
            }
            None => {
                self.entries.insert(desc.node_id, IrEntry { desc, failed: false, assigned: None });
                Ok(Registered { fresh: true, reinstated: false })
            }
        }
    }

    /// Liveness from any other message.
    pub fn touch(&mut self, node: NodeId, role: NodeRole, now: Micros) -> bool {
        let Some(e) = self.entries.get_mut(&node) else { return false };
        let reinstated = e.failed;
        e.desc.last_seen = e.desc.last_seen.max(now);
        e.desc.role = role;
        e.failed = false;
        reinstated
    }

    /// Marks entries silent for longer than the miss budget; returns the
    /// newly failed ones.
    pub fn expire(&mut self, now: Micros) -> Vec<(NodeId, Micros)> {
        let budget = Micros::from(self.ir_miss_threshold) * self.discovery_period;
        let mut out = Vec::new();
        for (id, e) in &mut self.entries {
            if !e.failed && now.saturating_sub(e.desc.last_seen) > budget {
                e.failed = true;
                out.push((*id, e.desc.last_seen));
            }
        }
        out
    }

    /// The live idle pool; every entry counts toward the score maxima,
    /// only unexcluded ones with enough capacity are eligible.
    pub fn candidates(&self, demand: ResourceDemand, exclude: &BTreeSet<NodeId>) -> Vec<Candidate> {
        self.entries
            .values()
            .filter(|e| !e.failed && e.assigned.is_none() && e.desc.role == NodeRole::IdleResource)
            .map(|e| Candidate {
                node: e.desc.node_id,
                cpu: e.desc.cpu_capacity,
                mem: e.desc.mem_capacity,
                latency: e.desc.link_latency_estimate,
                eligible: !exclude.contains(&e.desc.node_id)
                    && e.desc.cpu_capacity >= demand.cpu
                    && e.desc.mem_capacity >= demand.mem,
            })
            .collect()
    }

    pub fn select_ir(&self, spec: &DeploymentSpec, exclude: &BTreeSet<NodeId>) -> Result<NodeId, OrchError> {
        placement::select(&self.candidates(spec.resources, exclude)).ok_or(OrchError::NoSuitableIr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub deployment_id: String,
    pub active: NodeId,
    pub inactive: Vec<(NodeId, u8)>,
    pub epoch: Epoch,
    pub spec: DeploymentSpec,
}

impl DeploymentPlan {
    pub fn members(&self) -> Membership {
        Membership { active: self.active, inactive: self.inactive.clone(), followers: Vec::new() }
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.active == n || self.inactive.iter().any(|(m, _)| *m == n)
    }

    fn renumber(&mut self) {
        for (i, (_, r)) in self.inactive.iter_mut().enumerate() {
            *r = i as u8;
        }
    }
}

/// Pure victim rule for two active claims: the lower epoch loses, equal
/// epochs lose the higher node id. `None` unless both are active reports
/// for the same deployment from different nodes.
pub fn resolve_double_active(a: &StatusMessage, b: &StatusMessage) -> Option<NodeId> {
    if a.deployment_id != b.deployment_id
        || a.role != NodeRole::ActiveVpc
        || b.role != NodeRole::ActiveVpc
        || a.node_id == b.node_id
    {
        return None;
    }
    Some(match a.epoch.cmp(&b.epoch) {
        core::cmp::Ordering::Less => a.node_id,
        core::cmp::Ordering::Greater => b.node_id,
        core::cmp::Ordering::Equal => a.node_id.max(b.node_id),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Handover {
    pub at: Micros,
    pub new_plan: DeploymentPlan,
    pub committed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Decide,
    Release,
}

#[derive(Clone, Debug)]
struct DeploymentState {
    plan: DeploymentPlan,
    epoch_high: Epoch,
    ready: BTreeSet<NodeId>,
    in_sync: BTreeSet<NodeId>,
    /// Promotions not yet acknowledged with Ready.
    issued: BTreeMap<NodeId, (Micros, PromoteCmd)>,
    degraded: Option<u32>,
    announced_ready: bool,
    last_redundancy: Option<u32>,
    handover: Option<Handover>,
    /// Active claims in the current discovery round.
    round_actives: BTreeMap<NodeId, StatusMessage>,
    disabled: BTreeSet<NodeId>,
}

impl DeploymentState {
    fn id(&self) -> String {
        self.plan.deployment_id.clone()
    }

    fn next_fencing_epoch(&mut self) -> Epoch {
        // One epoch above the plan is left for a backup that may be
        // self-promoting concurrently.
        let e = Epoch(self.epoch_high.0.max(self.plan.epoch.0 + 1) + 1);
        self.epoch_high = e;
        e
    }

    fn members_with_followers(&self) -> Membership {
        let mut m = self.plan.members();
        if let Some(h) = &self.handover {
            m.followers = h.new_plan.members().nodes().collect();
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrStatus {
    pub node: NodeId,
    pub cpu_capacity: u32,
    pub mem_capacity: u32,
    pub link_latency_estimate: Micros,
    pub role: NodeRole,
    pub last_seen: Micros,
    pub failed: bool,
    pub assigned: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentStatus {
    pub plan: DeploymentPlan,
    pub ready: Vec<NodeId>,
    pub disabled: Vec<NodeId>,
    pub degraded_missing: Option<u32>,
    pub handover: Option<Handover>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorStatus {
    pub round: u64,
    pub irs: Vec<IrStatus>,
    pub deployments: Vec<DeploymentStatus>,
}

#[derive(Clone, Debug)]
pub struct Orchestrator {
    config: OrchestratorConfig,
    irs: IrRegistry,
    deployments: BTreeMap<String, DeploymentState>,
    round: u64,
    steps: BTreeMap<u64, (String, Step)>,
    next_step: u64,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig) -> Self {
        let irs = IrRegistry::new(config.discovery_period, config.ir_miss_threshold);
        Orchestrator { config, irs, deployments: BTreeMap::new(), round: 0, steps: BTreeMap::new(), next_step: TIMER_FIRST_STEP }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn irs(&self) -> &IrRegistry {
        &self.irs
    }

    pub fn plan(&self, id: &str) -> Option<&DeploymentPlan> {
        self.deployments.get(id).map(|d| &d.plan)
    }

    pub fn status(&self) -> OrchestratorStatus {
        OrchestratorStatus {
            round: self.round,
            irs: self
                .irs
                .entries
                .values()
                .map(|e| IrStatus {
                    node: e.desc.node_id,
                    cpu_capacity: e.desc.cpu_capacity,
                    mem_capacity: e.desc.mem_capacity,
                    link_latency_estimate: e.desc.link_latency_estimate,
                    role: e.desc.role,
                    last_seen: e.desc.last_seen,
                    failed: e.failed,
                    assigned: e.assigned.clone(),
                })
                .collect(),
            deployments: self
                .deployments
                .values()
                .map(|d| DeploymentStatus {
                    plan: d.plan.clone(),
                    ready: d.ready.iter().copied().filter(|n| d.plan.contains(*n)).collect(),
                    disabled: d.disabled.iter().copied().collect(),
                    degraded_missing: d.degraded,
                    handover: d.handover.clone(),
                })
                .collect(),
        }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_, Note>) {
        ctx.set_timer_after(TIMER_DISCOVERY, 0);
    }

    pub fn restart(&mut self) {
        *self = Orchestrator::new(self.config.clone());
    }

    fn send(&self, ctx: &mut Ctx<'_, Note>, dst: NodeId, msg: &Message) {
        transport::send(ctx, &self.config.policy, dst, msg);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, key: u64) {
        if key == TIMER_DISCOVERY {
            return self.discovery_tick(ctx);
        }
        if let Some((id, step)) = self.steps.remove(&key) {
            match step {
                Step::Decide => self.handover_decide(ctx, &id),
                Step::Release => self.handover_release(ctx, &id),
            }
        }
    }

    /// Broadcasts discovery, expires silent resources and retries pending
    /// work.
    pub fn discovery_tick(&mut self, ctx: &mut Ctx<'_, Note>) {
        let now = ctx.local_now();
        self.round += 1;
        let round = self.round;
        for t in &self.config.targets {
            transport::broadcast(ctx, &self.config.policy, *t, &Message::Discovery { round });
        }
        ctx.note(Note::DiscoverySent { round, targets: self.config.targets.len() as u32 });
        for (node, last_seen) in self.irs.expire(now) {
            ctx.note(Note::IrFailed { node, last_seen });
        }
        let ids: Vec<String> = self.deployments.keys().cloned().collect();
        for id in ids {
            let retry = self.config.promote_retry();
            let d = self.deployments.get_mut(&id).unwrap();
            d.round_actives.clear();
            let mut resend = Vec::new();
            for (n, (at, cmd)) in d.issued.iter_mut() {
                if now.saturating_sub(*at) >= retry {
                    *at = now;
                    resend.push((*n, cmd.clone()));
                }
            }
            for (n, cmd) in resend {
                self.send(ctx, n, &Message::PromoteCmd(cmd));
            }
            if self.deployments[&id].degraded.is_some() {
                self.restore(ctx, &id);
            }
        }
        ctx.set_timer_after(TIMER_DISCOVERY, self.config.discovery_period);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, msg: Message) {
        let now = ctx.local_now();
        match msg {
            Message::Register(desc) if desc.node_id == src => self.on_register(ctx, desc, now),
            Message::Status(s) if s.node_id == src => self.on_status(ctx, s, now),
            Message::BackupRequest(b) => {
                let _ = self.handle_backup_request(ctx, src, b);
            }
            _ => {}
        }
    }

    fn on_register(&mut self, ctx: &mut Ctx<'_, Note>, desc: NodeDescriptor, now: Micros) {
        let node = desc.node_id;
        let role = desc.role;
        if role == NodeRole::IdleResource {
            self.reclaim(ctx, node);
        }
        match self.irs.register(desc, now) {
            Ok(r) => {
                if r.reinstated {
                    ctx.note(Note::IrReinstated { node });
                }
                if r.fresh {
                    ctx.note(Note::IrRegistered { node, fresh: true });
                }
            }
            Err(_) => ctx.note(Note::IrRejected { node, role }),
        }
    }

    /// An idle announcement from a node we still count as in use: it was
    /// released, disabled and restarted, or lost its role.
    fn reclaim(&mut self, ctx: &mut Ctx<'_, Note>, node: NodeId) {
        let Some(dep_id) = self.irs.entries.get(&node).and_then(|e| e.assigned.clone()) else { return };
        let Some(d) = self.deployments.get(&dep_id) else {
            self.irs.entries.get_mut(&node).unwrap().assigned = None;
            return;
        };
        if d.issued.contains_key(&node) {
            // Promotion still in flight; the node has not seen it yet.
            return;
        }
        let in_handover = d.handover.as_ref().is_some_and(|h| h.new_plan.contains(node));
        if d.plan.contains(node) || in_handover {
            self.member_lost(ctx, &dep_id, node);
        }
        self.irs.entries.get_mut(&node).unwrap().assigned = None;
    }

    fn on_status(&mut self, ctx: &mut Ctx<'_, Note>, s: StatusMessage, now: Micros) {
        if self.irs.touch(s.node_id, s.role, now) {
            ctx.note(Note::IrReinstated { node: s.node_id });
        }
        let Some(d) = self.deployments.get_mut(&s.deployment_id) else { return };
        let id = d.id();
        match s.kind {
            StatusKind::Ready => {
                d.issued.remove(&s.node_id);
                d.ready.insert(s.node_id);
                self.refresh_readiness(ctx, &id);
            }
            StatusKind::InSync => {
                d.in_sync.insert(s.node_id);
            }
            StatusKind::Fault => {
                if let Some(e) = self.irs.entries.get_mut(&s.node_id) {
                    e.assigned = None;
                }
                self.member_lost(ctx, &id, s.node_id);
            }
            StatusKind::Report if s.role == NodeRole::ActiveVpc && s.round == self.round => {
                self.check_double_active(ctx, s);
            }
            _ => {}
        }
    }

    fn check_double_active(&mut self, ctx: &mut Ctx<'_, Note>, s: StatusMessage) {
        let d = self.deployments.get_mut(&s.deployment_id).unwrap();
        if d.disabled.contains(&s.node_id) {
            return;
        }
        let exempt = |a: NodeId, b: NodeId| {
            d.handover.as_ref().is_some_and(|h| {
                let pair = [d.plan.active, h.new_plan.active];
                pair.contains(&a) && pair.contains(&b)
            })
        };
        let rival = d.round_actives.values().find(|o| o.node_id != s.node_id && !exempt(o.node_id, s.node_id)).cloned();
        d.round_actives.insert(s.node_id, s.clone());
        let Some(other) = rival else { return };
        let Some(victim) = resolve_double_active(&other, &s) else { return };
        let (survivor, survivor_epoch) =
            if victim == s.node_id { (other.node_id, other.epoch) } else { (s.node_id, s.epoch) };
        let victim_epoch = if victim == s.node_id { s.epoch } else { other.epoch };
        let id = d.id();
        ctx.note(Note::DoubleActive { deployment: id.clone(), a: other.node_id, a_epoch: other.epoch, b: s.node_id, b_epoch: s.epoch });
        d.disabled.insert(victim);
        d.round_actives.remove(&victim);
        ctx.note(Note::DisableIssued { deployment: id.clone(), node: victim, epoch: victim_epoch });
        let cmd = ReleaseCmd { deployment_id: id.clone(), action: ReleaseAction::Disable };
        let mut changed = false;
        if d.plan.active == victim {
            d.plan.active = survivor;
            d.plan.inactive.retain(|(n, _)| *n != survivor);
            d.plan.renumber();
            d.plan.epoch = d.plan.epoch.max(survivor_epoch);
            d.epoch_high = d.epoch_high.max(survivor_epoch);
            ctx.note(Note::ActiveAdopted { deployment: id.clone(), node: survivor, epoch: d.plan.epoch });
            changed = true;
        }
        self.send(ctx, victim, &Message::ReleaseCmd(cmd));
        if changed {
            self.restore(ctx, &id);
        }
    }

    /// A member stopped serving (fault or restart). Inactives are replaced;
    /// a lost active is left to its rank-0 backup.
    fn member_lost(&mut self, ctx: &mut Ctx<'_, Note>, id: &str, node: NodeId) {
        let Some(d) = self.deployments.get_mut(id) else { return };
        d.ready.remove(&node);
        d.in_sync.remove(&node);
        d.issued.remove(&node);
        let was_inactive = d.plan.inactive.iter().position(|(n, _)| *n == node);
        if let Some(pos) = was_inactive {
            d.plan.inactive.remove(pos);
            d.plan.renumber();
            if pos == 0 {
                d.plan.epoch = d.next_fencing_epoch();
            }
            self.restore(ctx, id);
        }
    }

    /// Backup restoration after a failure report from an active.
    pub fn handle_backup_request(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, b: BackupRequest) -> Result<(), OrchError> {
        let Some(d) = self.deployments.get_mut(&b.deployment_id) else {
            return Err(OrchError::UnknownDeployment(b.deployment_id));
        };
        let id = d.id();
        if b.epoch < d.plan.epoch || (b.epoch == d.plan.epoch && src != d.plan.active) {
            ctx.note(Note::StaleEpoch { deployment: id, from: src, epoch: b.epoch, current: d.plan.epoch });
            return Err(OrchError::StaleEpoch { got: b.epoch, current: d.plan.epoch });
        }
        ctx.note(Note::BackupRequestHandled { deployment: id.clone(), from: src, epoch: b.epoch, failed: b.failed });
        if b.epoch > d.plan.epoch {
            // The rank-0 backup promoted itself.
            d.plan.active = src;
            d.plan.inactive.retain(|(n, _)| *n != src);
            d.plan.epoch = b.epoch;
            d.epoch_high = d.epoch_high.max(b.epoch);
            d.ready.insert(src);
            ctx.note(Note::ActiveAdopted { deployment: id.clone(), node: src, epoch: b.epoch });
        }
        if let Some(failed) = b.failed {
            if let Some(pos) = d.plan.inactive.iter().position(|(n, _)| *n == failed) {
                d.plan.inactive.remove(pos);
                d.ready.remove(&failed);
                if pos == 0 {
                    // Fence out the lost backup in case it is alive and
                    // promotes itself behind a partition.
                    d.plan.epoch = d.next_fencing_epoch();
                }
            }
        }
        d.plan.renumber();
        self.restore(ctx, &id);
        Ok(())
    }

    /// Tops the backups up to the spec's redundancy; degrades if the pool
    /// is empty. Always re-announces membership.
    fn restore(&mut self, ctx: &mut Ctx<'_, Note>, id: &str) {
        let now = ctx.local_now();
        let d = self.deployments.get_mut(id).unwrap();
        let target = usize::from(d.plan.spec.redundancy_count);
        let mut exclude: BTreeSet<NodeId> = d.plan.members().nodes().chain(d.disabled.iter().copied()).collect();
        let mut promoted = Vec::new();
        let mut missing = 0;
        while d.plan.inactive.len() < target {
            let pool = self.irs.candidates(d.plan.spec.resources, &exclude);
            let chosen = placement::select(&pool);
            ctx.note(Note::Selected { deployment: id.to_string(), purpose: Purpose::Backup, pool, chosen });
            let Some(n) = chosen else {
                missing = target - d.plan.inactive.len();
                break;
            };
            exclude.insert(n);
            let rank = d.plan.inactive.len() as u8;
            d.plan.inactive.push((n, rank));
            self.irs.entries.get_mut(&n).unwrap().assigned = Some(id.to_string());
            promoted.push((n, rank));
        }
        let missing = (missing > 0).then_some(missing as u32);
        if missing != d.degraded {
            if let Some(m) = missing {
                ctx.note(Note::DegradedRedundancy { deployment: id.to_string(), missing: m });
            }
            d.degraded = missing;
        }
        let members = d.plan.members();
        for (n, rank) in promoted {
            let cmd = PromoteCmd {
                deployment_id: id.to_string(),
                role: PromoteRole::Inactive(rank),
                epoch: d.plan.epoch,
                spec: d.plan.spec.clone(),
                members: members.clone(),
                handover_at: None,
                state_source: None,
            };
            ctx.note(Note::PromoteIssued { deployment: id.to_string(), node: n, role: NodeRole::InactiveVpc(rank), epoch: d.plan.epoch });
            d.issued.insert(n, (now, cmd.clone()));
            transport::send(ctx, &self.config.policy, n, &Message::PromoteCmd(cmd));
        }
        self.announce_members(ctx, id);
        self.refresh_readiness(ctx, id);
    }

    /// Sends the current membership to every member and the endpoint.
    fn announce_members(&mut self, ctx: &mut Ctx<'_, Note>, id: &str) {
        let d = &self.deployments[id];
        let members = d.members_with_followers();
        let cmd = DeployCmd { deployment_id: id.to_string(), epoch: d.plan.epoch, members: members.clone() };
        ctx.note(Note::MembersUpdated { deployment: id.to_string(), epoch: d.plan.epoch, members });
        let to: Vec<NodeId> = d.plan.members().nodes().chain(core::iter::once(self.config.icps)).collect();
        for n in to {
            self.send(ctx, n, &Message::DeployCmd(cmd.clone()));
        }
    }

    fn refresh_readiness(&mut self, ctx: &mut Ctx<'_, Note>, id: &str) {
        let d = self.deployments.get_mut(id).unwrap();
        let ready = d.plan.inactive.iter().filter(|(n, _)| d.ready.contains(n)).count() as u32;
        if d.last_redundancy != Some(ready) && d.ready.contains(&d.plan.active) {
            d.last_redundancy = Some(ready);
            ctx.note(Note::Redundancy { deployment: id.to_string(), ready, target: u32::from(d.plan.spec.redundancy_count) });
        }
        if !d.announced_ready && d.plan.members().nodes().all(|n| d.ready.contains(&n)) {
            d.announced_ready = true;
            ctx.note(Note::DeploymentReady { deployment: id.to_string() });
        }
    }

    /// Picks `1 + r` distinct resources or none at all.
    fn pick(
        &mut self,
        ctx: &mut Ctx<'_, Note>,
        spec: &DeploymentSpec,
        exclude: &mut BTreeSet<NodeId>,
        purposes: (Purpose, Purpose),
    ) -> Result<Vec<NodeId>, OrchError> {
        let needed = 1 + u32::from(spec.redundancy_count);
        let mut picks = Vec::new();
        for i in 0..needed {
            let pool = self.irs.candidates(spec.resources, exclude);
            let chosen = placement::select(&pool);
            let purpose = if i == 0 { purposes.0 } else { purposes.1 };
            ctx.note(Note::Selected { deployment: spec.deployment_id.clone(), purpose, pool, chosen });
            match chosen {
                Some(n) => {
                    exclude.insert(n);
                    picks.push(n);
                }
                None => {
                    let e = OrchError::InsufficientResources { needed, available: picks.len() as u32 };
                    ctx.note(Note::DeployRejected { deployment: spec.deployment_id.clone(), reason: e.to_string() });
                    return Err(e);
                }
            }
        }
        Ok(picks)
    }

    /// Initial deployment: all of `1 + r` resources or nothing.
    pub fn deploy(&mut self, ctx: &mut Ctx<'_, Note>, spec: DeploymentSpec) -> Result<DeploymentPlan, OrchError> {
        let reject = |ctx: &mut Ctx<'_, Note>, e: OrchError| {
            ctx.note(Note::DeployRejected { deployment: spec.deployment_id.clone(), reason: e.to_string() });
            Err(e)
        };
        if let Err(e) = spec.validate() {
            return reject(ctx, e.into());
        }
        if self.deployments.contains_key(&spec.deployment_id) {
            return reject(ctx, OrchError::DuplicateDeployment(spec.deployment_id.clone()));
        }
        let picks = self.pick(ctx, &spec, &mut BTreeSet::new(), (Purpose::Active, Purpose::Inactive))?;
        let plan = DeploymentPlan {
            deployment_id: spec.deployment_id.clone(),
            active: picks[0],
            inactive: picks[1..].iter().enumerate().map(|(i, n)| (*n, i as u8)).collect(),
            epoch: Epoch(1),
            spec,
        };
        let id = plan.deployment_id.clone();
        ctx.note(Note::DeployStarted { deployment: id.clone(), epoch: plan.epoch, members: plan.members() });
        self.promote_all(ctx, &plan, None);
        self.deployments.insert(
            id.clone(),
            DeploymentState {
                plan: plan.clone(),
                epoch_high: plan.epoch,
                ready: BTreeSet::new(),
                in_sync: BTreeSet::new(),
                issued: BTreeMap::new(),
                degraded: None,
                announced_ready: false,
                last_redundancy: None,
                handover: None,
                round_actives: BTreeMap::new(),
                disabled: BTreeSet::new(),
            },
        );
        let now = ctx.local_now();
        let d = self.deployments.get_mut(&id).unwrap();
        for cmd in plan_commands(&plan, None) {
            d.issued.insert(node_of(&plan, &cmd), (now, cmd));
        }
        let cmd = DeployCmd { deployment_id: id.clone(), epoch: plan.epoch, members: plan.members() };
        self.send(ctx, self.config.icps, &Message::DeployCmd(cmd));
        Ok(plan)
    }

    fn promote_all(&mut self, ctx: &mut Ctx<'_, Note>, plan: &DeploymentPlan, handover: Option<(Micros, NodeId)>) {
        for cmd in plan_commands(plan, handover) {
            let node = node_of(plan, &cmd);
            let role = match cmd.role {
                PromoteRole::Active => NodeRole::ActiveVpc,
                PromoteRole::Inactive(r) => NodeRole::InactiveVpc(r),
            };
            self.irs.entries.get_mut(&node).unwrap().assigned = Some(plan.deployment_id.clone());
            ctx.note(Note::PromoteIssued { deployment: plan.deployment_id.clone(), node, role, epoch: plan.epoch });
            self.send(ctx, node, &Message::PromoteCmd(cmd));
        }
    }

    /// Scheduled redeployment onto fresh resources with a handover at
    /// `handover_time` (cluster clock).
    pub fn redeploy(
        &mut self,
        ctx: &mut Ctx<'_, Note>,
        id: &str,
        mut spec: DeploymentSpec,
        handover_time: Micros,
    ) -> Result<DeploymentPlan, OrchError> {
        let now = ctx.local_now();
        spec.deployment_id = id.to_string();
        let reject = |ctx: &mut Ctx<'_, Note>, e: OrchError| {
            ctx.note(Note::DeployRejected { deployment: id.to_string(), reason: e.to_string() });
            Err(e)
        };
        let Some(d) = self.deployments.get(id) else { return reject(ctx, OrchError::UnknownDeployment(id.to_string())) };
        if d.handover.is_some() {
            return reject(ctx, OrchError::HandoverInProgress(id.to_string()));
        }
        if let Err(e) = spec.validate() {
            return reject(ctx, e.into());
        }
        let earliest = now + self.config.startup_margin(&spec);
        if handover_time <= earliest {
            return reject(ctx, OrchError::HandoverTooSoon { at: handover_time, earliest });
        }
        let mut exclude: BTreeSet<NodeId> = d.plan.members().nodes().chain(d.disabled.iter().copied()).collect();
        let old_active = d.plan.active;
        let picks = self.pick(ctx, &spec, &mut exclude, (Purpose::RedeployActive, Purpose::RedeployInactive))?;
        let d = self.deployments.get_mut(id).unwrap();
        let epoch = d.next_fencing_epoch();
        let new_plan = DeploymentPlan {
            deployment_id: id.to_string(),
            active: picks[0],
            inactive: picks[1..].iter().enumerate().map(|(i, n)| (*n, i as u8)).collect(),
            epoch,
            spec,
        };
        d.handover = Some(Handover { at: handover_time, new_plan: new_plan.clone(), committed: false });
        for cmd in plan_commands(&new_plan, Some((handover_time, old_active))) {
            d.issued.insert(node_of(&new_plan, &cmd), (now, cmd));
        }
        ctx.note(Note::HandoverScheduled {
            deployment: id.to_string(),
            at: handover_time,
            old_active,
            new_active: new_plan.active,
            epoch,
        });
        self.promote_all(ctx, &new_plan, Some((handover_time, old_active)));
        self.announce_members(ctx, id);
        let lead = self.config.handover_lead();
        self.schedule(ctx, id, Step::Decide, handover_time - lead);
        Ok(new_plan)
    }

    fn schedule(&mut self, ctx: &mut Ctx<'_, Note>, id: &str, step: Step, at_local: Micros) {
        let key = self.next_step;
        self.next_step += 1;
        self.steps.insert(key, (id.to_string(), step));
        ctx.set_timer_at_local(key, at_local);
    }

    fn handover_decide(&mut self, ctx: &mut Ctx<'_, Note>, id: &str) {
        let Some(d) = self.deployments.get_mut(id) else { return };
        let Some(h) = d.handover.as_mut() else { return };
        let new = h.new_plan.clone();
        let all_ready = new.members().nodes().all(|n| d.ready.contains(&n));
        let in_sync = d.in_sync.contains(&new.active);
        if all_ready && in_sync {
            h.committed = true;
            let at = h.at;
            let cmd = HandoverCmd {
                deployment_id: id.to_string(),
                handover_time: at,
                old_active: d.plan.active,
                new_active: new.active,
                new_epoch: new.epoch,
            };
            let old = d.plan.active;
            ctx.note(Note::HandoverCommitted { deployment: id.to_string(), at });
            self.send(ctx, old, &Message::HandoverCmd(cmd.clone()));
            self.send(ctx, new.active, &Message::HandoverCmd(cmd));
            let lead = self.config.handover_lead();
            self.schedule(ctx, id, Step::Release, at + lead);
        } else {
            let reason = if all_ready { "new active not in sync" } else { "new nodes not ready" };
            ctx.note(Note::HandoverAborted { deployment: id.to_string(), reason: reason.to_string() });
            d.handover = None;
            let nodes: Vec<NodeId> = new.members().nodes().collect();
            for n in &nodes {
                d.issued.remove(n);
                d.ready.remove(n);
                d.in_sync.remove(n);
            }
            for n in nodes {
                self.release(ctx, id, n);
            }
            self.announce_members(ctx, id);
        }
    }

    fn release(&mut self, ctx: &mut Ctx<'_, Note>, id: &str, node: NodeId) {
        ctx.note(Note::ReleaseIssued { deployment: id.to_string(), node });
        if let Some(e) = self.irs.entries.get_mut(&node) {
            e.assigned = None;
        }
        let cmd = ReleaseCmd { deployment_id: id.to_string(), action: ReleaseAction::Release };
        self.send(ctx, node, &Message::ReleaseCmd(cmd));
    }

    fn handover_release(&mut self, ctx: &mut Ctx<'_, Note>, id: &str) {
        let Some(d) = self.deployments.get_mut(id) else { return };
        let Some(h) = d.handover.take() else { return };
        let old = core::mem::replace(&mut d.plan, h.new_plan);
        d.epoch_high = d.epoch_high.max(d.plan.epoch);
        d.announced_ready = false;
        d.last_redundancy = None;
        d.degraded = None;
        // Backups first, so none of them mistakes the active's release for
        // a failure.
        for (n, _) in &old.inactive {
            self.release(ctx, id, *n);
        }
        self.release(ctx, id, old.active);
        let d = self.deployments.get_mut(id).unwrap();
        for n in old.members().nodes() {
            d.ready.remove(&n);
            d.in_sync.remove(&n);
        }
        self.announce_members(ctx, id);
        self.refresh_readiness(ctx, id);
    }
}

fn node_of(plan: &DeploymentPlan, cmd: &PromoteCmd) -> NodeId {
    match cmd.role {
        PromoteRole::Active => plan.active,
        PromoteRole::Inactive(r) => plan.inactive[usize::from(r)].0,
    }
}

/// Promotion commands for a plan, active first.
fn plan_commands(plan: &DeploymentPlan, handover: Option<(Micros, NodeId)>) -> Vec<PromoteCmd> {
    let members = plan.members();
    let mut out = Vec::new();
    let cmd = |role, handover_at, state_source| PromoteCmd {
        deployment_id: plan.deployment_id.clone(),
        role,
        epoch: plan.epoch,
        spec: plan.spec.clone(),
        members: members.clone(),
        handover_at,
        state_source,
    };
    out.push(cmd(PromoteRole::Active, handover.map(|h| h.0), handover.map(|h| h.1)));
    for (_, rank) in &plan.inactive {
        out.push(cmd(PromoteRole::Inactive(*rank), None, None));
    }
    out
}
