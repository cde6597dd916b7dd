//! A simulated plant floor: orchestrator, VPF registry, sensor/actuator
//! endpoint and a row of idle resources on one switched network.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::hash::Digest256;
use crate::icps::{Icps, IcpsConfig, Plant};
use crate::model::{DeploymentSpec, ExecutionMode, Micros, NodeId, SemVer, TimingBudget, VpfDescriptor};
use crate::note::Note;
use crate::orchestrator::{DeploymentPlan, OrchError, Orchestrator, OrchestratorConfig, OrchestratorStatus};
use crate::registry::{Registry, RegistryService};
use crate::runtime::{NodeParams, NodeRuntime, NodeStatus};
use crate::simnet::{Actor, Ctx, LinkSpec, SimConfig, SimError, Simulator, Trace};
use crate::transport::{self, FramePolicy};

pub const VPCMO: NodeId = NodeId(1);
pub const REGISTRY: NodeId = NodeId(2);
pub const ICPS: NodeId = NodeId(3);
pub const FIRST_IR: u64 = 10;

pub fn ir_id(i: usize) -> NodeId {
    NodeId(FIRST_IR + i as u64)
}

/// One participant of the simulated cluster.
#[derive(Clone, Debug)]
pub enum Component {
    Orchestrator(Orchestrator),
    Registry(RegistryService),
    Icps(Icps),
    Node(NodeRuntime),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "component", rename_all = "snake_case")]
pub enum ComponentStatus {
    Orchestrator(OrchestratorStatus),
    Registry { artifacts: u64, served: u64 },
    Icps { loops: BTreeMap<String, (u64, u64)> },
    Node(NodeStatus),
}

impl Actor for Component {
    type Note = Note;
    type Status = ComponentStatus;

    fn start(&mut self, ctx: &mut Ctx<'_, Note>) {
        match self {
            Component::Orchestrator(o) => o.start(ctx),
            Component::Registry(_) => {}
            Component::Icps(i) => i.start(ctx),
            Component::Node(n) => n.start(ctx),
        }
    }

    fn on_frame(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, frame: &[u8]) {
        let Some(msg) = transport::open(ctx, src, frame) else { return };
        match self {
            Component::Orchestrator(o) => o.on_message(ctx, src, msg),
            Component::Registry(r) => r.on_message(ctx, src, msg),
            Component::Icps(i) => i.on_message(ctx, src, msg),
            Component::Node(n) => n.on_message(ctx, src, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, key: u64) {
        match self {
            Component::Orchestrator(o) => o.on_timer(ctx, key),
            Component::Registry(_) => {}
            Component::Icps(i) => i.on_timer(ctx, key),
            Component::Node(n) => n.on_timer(ctx, key),
        }
    }

    fn restart(&mut self) {
        match self {
            Component::Orchestrator(o) => o.restart(),
            Component::Registry(_) => {}
            Component::Icps(i) => i.restart(),
            Component::Node(n) => n.restart(),
        }
    }

    fn status(&self) -> ComponentStatus {
        match self {
            Component::Orchestrator(o) => ComponentStatus::Orchestrator(o.status()),
            Component::Registry(r) => ComponentStatus::Registry { artifacts: r.registry.len() as u64, served: r.served },
            Component::Icps(i) => {
                ComponentStatus::Icps { loops: i.loops.iter().map(|(k, l)| (k.clone(), (l.accepted, l.rejected))).collect() }
            }
            Component::Node(n) => ComponentStatus::Node(n.status()),
        }
    }
}

pub type ClusterTrace = Trace<Note, ComponentStatus>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrSpec {
    pub cpu: u32,
    pub mem: u32,
}

impl Default for IrSpec {
    fn default() -> Self {
        IrSpec { cpu: 4, mem: 4096 }
    }
}

/// A VPF published to the registry at boot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub vpf_id: String,
    pub version: SemVer,
    pub execution_mode: ExecutionMode,
    pub logic_name: String,
    pub state_schema_id: String,
    /// Parameter sheet, see [`crate::runtime::vpf`].
    pub params: String,
}

impl Artifact {
    pub fn descriptor(&self) -> VpfDescriptor {
        VpfDescriptor {
            vpf_id: self.vpf_id.clone(),
            version: self.version,
            execution_mode: self.execution_mode,
            logic_name: self.logic_name.clone(),
            state_schema_id: self.state_schema_id.clone(),
            artifact_digest: Digest256::of(self.params.as_bytes()),
        }
    }

    pub fn default_pid(control_period: Micros) -> Self {
        Artifact {
            vpf_id: "pid".into(),
            version: SemVer::new(1, 0, 0),
            execution_mode: ExecutionMode::Cyclic { period: control_period },
            logic_name: "pid".into(),
            state_schema_id: "pid/1".into(),
            params: "# level loop\nkp=0.5\nki=5\nkd=0.0001\nsetpoint=1\n".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub irs: Vec<IrSpec>,
    pub link: LinkSpec,
    /// Per-pair link overrides (symmetric).
    pub link_overrides: Vec<(NodeId, NodeId, LinkSpec)>,
    pub clock_sync_accuracy: Micros,
    pub clock_offsets: BTreeMap<NodeId, i64>,
    pub discovery_period: Micros,
    pub ir_miss_threshold: u32,
    pub fetch_estimate: Micros,
    pub buffer_cap: usize,
    pub policy: FramePolicy,
    pub control_period: Micros,
    pub plant: Plant,
    pub sensor: String,
    pub actuator: String,
    pub artifacts: Vec<Artifact>,
    /// Artifact ids the registry serves with a flipped byte.
    pub corrupt: Vec<String>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            irs: alloc::vec![IrSpec::default(); 4],
            link: LinkSpec::default(),
            link_overrides: Vec::new(),
            clock_sync_accuracy: 1,
            clock_offsets: BTreeMap::new(),
            discovery_period: 10_000,
            ir_miss_threshold: 3,
            fetch_estimate: 1_000,
            buffer_cap: 64,
            policy: FramePolicy::default(),
            control_period: 1_000,
            plant: Plant::default(),
            sensor: "pv".into(),
            actuator: "u".into(),
            artifacts: alloc::vec![Artifact::default_pid(1_000)],
            corrupt: Vec::new(),
        }
    }
}

impl ClusterSpec {
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut v = alloc::vec![VPCMO, REGISTRY, ICPS];
        v.extend((0..self.irs.len()).map(ir_id));
        v
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::star(seed, &self.node_ids(), self.link);
        for (a, b, l) in &self.link_overrides {
            cfg.link(*a, *b, *l);
        }
        cfg.clock_sync_accuracy = self.clock_sync_accuracy;
        cfg.clock_offsets = self.clock_offsets.clone();
        cfg
    }

    pub fn timing(&self) -> TimingBudget {
        let cfg = self.sim_config(0);
        TimingBudget {
            jitter_max: cfg.max_jitter(),
            clock_accuracy: self.clock_sync_accuracy,
            max_link_latency: cfg.max_base_latency(),
        }
    }

    /// Fills zero artifact digests in `spec` from the published artifacts.
    pub fn resolve_spec(&self, spec: &mut DeploymentSpec) {
        for v in &mut spec.vpfs {
            if v.artifact_digest != Digest256::ZERO {
                continue;
            }
            if let Some(a) = self.artifacts.iter().find(|a| a.vpf_id == v.vpf_id && a.version == v.version) {
                v.artifact_digest = Digest256::of(a.params.as_bytes());
            }
        }
    }
}

/// A cluster under simulation plus convenience operations.
pub struct Cluster {
    pub spec: ClusterSpec,
    pub sim: Simulator<Component>,
}

impl Cluster {
    pub fn new(spec: &ClusterSpec, seed: u64) -> Result<Self, SimError> {
        let mut sim = Simulator::new(spec.sim_config(seed));
        let timing = spec.timing();
        let ir_ids: Vec<NodeId> = (0..spec.irs.len()).map(ir_id).collect();
        let orch = Orchestrator::new(OrchestratorConfig {
            discovery_period: spec.discovery_period,
            ir_miss_threshold: spec.ir_miss_threshold,
            fetch_estimate: spec.fetch_estimate,
            timing,
            icps: ICPS,
            policy: spec.policy,
            targets: ir_ids.clone(),
        });
        sim.add_node(VPCMO, Component::Orchestrator(orch))?;
        let mut registry = Registry::new();
        for a in &spec.artifacts {
            // Duplicate versions keep the first publication.
            let _ = registry.publish(a.descriptor(), a.params.as_bytes().to_vec());
        }
        let mut service = RegistryService::new(registry, spec.policy);
        service.corrupt = spec.corrupt.iter().cloned().collect::<BTreeSet<_>>();
        sim.add_node(REGISTRY, Component::Registry(service))?;
        let icps = Icps::new(IcpsConfig {
            control_period: spec.control_period,
            sensor: spec.sensor.clone(),
            actuator: spec.actuator.clone(),
            plant: spec.plant,
            policy: spec.policy,
        });
        sim.add_node(ICPS, Component::Icps(icps))?;
        for (i, ir) in spec.irs.iter().enumerate() {
            let params = NodeParams {
                node_id: ir_ids[i],
                cpu_capacity: ir.cpu,
                mem_capacity: ir.mem,
                link_latency_estimate: sim.config().links.get(&(ir_ids[i], VPCMO)).map_or(0, |l| l.base_latency),
                vpcmo: VPCMO,
                registry: REGISTRY,
                icps: ICPS,
                policy: spec.policy,
                timing,
                buffer_cap: spec.buffer_cap,
            };
            sim.add_node(ir_ids[i], Component::Node(NodeRuntime::new(params)))?;
        }
        Ok(Cluster { spec: spec.clone(), sim })
    }

    pub fn now(&self) -> Micros {
        self.sim.now()
    }

    pub fn run_until(&mut self, t: Micros) {
        self.sim.run_until(t);
    }

    fn with_orchestrator<R>(
        &mut self,
        f: impl FnOnce(&mut Orchestrator, &mut Ctx<'_, Note>) -> Result<R, OrchError>,
    ) -> Result<R, OrchError> {
        match self.sim.invoke(VPCMO, |c, ctx| match c {
            Component::Orchestrator(o) => f(o, ctx),
            _ => unreachable!("node 1 is the orchestrator"),
        }) {
            Ok(r) => r,
            Err(_) => Err(OrchError::NoSuitableIr),
        }
    }

    pub fn deploy(&mut self, mut spec: DeploymentSpec) -> Result<DeploymentPlan, OrchError> {
        self.spec.resolve_spec(&mut spec);
        self.with_orchestrator(|o, ctx| o.deploy(ctx, spec))
    }

    pub fn redeploy(&mut self, id: &str, mut spec: DeploymentSpec, handover_at: Micros) -> Result<DeploymentPlan, OrchError> {
        self.spec.resolve_spec(&mut spec);
        self.with_orchestrator(|o, ctx| o.redeploy(ctx, id, spec, handover_at))
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        match self.sim.actor(VPCMO) {
            Some(Component::Orchestrator(o)) => o,
            _ => unreachable!("node 1 is the orchestrator"),
        }
    }

    pub fn plan(&self, id: &str) -> Option<DeploymentPlan> {
        self.orchestrator().plan(id).cloned()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRuntime> {
        match self.sim.actor(id) {
            Some(Component::Node(n)) => Some(n),
            _ => None,
        }
    }

    pub fn icps(&self) -> &Icps {
        match self.sim.actor(ICPS) {
            Some(Component::Icps(i)) => i,
            _ => unreachable!("node 3 is the endpoint"),
        }
    }

    pub fn statuses(&self) -> BTreeMap<NodeId, ComponentStatus> {
        self.sim.actors().map(|(id, a)| (id, a.status())).collect()
    }

    pub fn into_trace(self) -> ClusterTrace {
        self.sim.into_trace()
    }
}
