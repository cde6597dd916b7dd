//! The industrial endpoint: samples a simulated plant, fans process data
//! out to every replica of a deployment, and fences incoming control data
//! before applying it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{ControlData, Fence, Micros, NodeId, ProcessData};
use crate::note::Note;
use crate::simnet::Ctx;
use crate::transport::{self, FramePolicy};
use crate::wire::{DeployCmd, Message};

const TIMER_SAMPLE: u64 = 1;

/// First-order plant `pv += gain · (u − pv)` per control period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub gain: f64,
    pub initial: f64,
}

impl Default for Plant {
    fn default() -> Self {
        Plant { gain: 0.05, initial: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpsConfig {
    pub control_period: Micros,
    /// Sensor channel fed to VPFs and actuator channel read back.
    pub sensor: String,
    pub actuator: String,
    pub plant: Plant,
    pub policy: FramePolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Loop {
    pub members: Vec<NodeId>,
    pub fence: Fence,
    pub accepted: u64,
    pub rejected: u64,
    pub pv: f64,
    pub u: f64,
}

#[derive(Clone, Debug)]
pub struct Icps {
    pub config: IcpsConfig,
    pub loops: BTreeMap<String, Loop>,
    hint: u64,
}

impl Icps {
    pub fn new(config: IcpsConfig) -> Self {
        Icps { config, loops: BTreeMap::new(), hint: 0 }
    }

    pub fn start(&mut self, ctx: &mut Ctx<'_, Note>) {
        self.arm(ctx);
    }

    pub fn restart(&mut self) {
        self.loops.clear();
    }

    /// Samples on multiples of the control period in local time.
    fn arm(&self, ctx: &mut Ctx<'_, Note>) {
        let p = self.config.control_period.max(1);
        let next = (ctx.local_now() / p + 1) * p;
        ctx.set_timer_at_local(TIMER_SAMPLE, next);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, _key: u64) {
        self.hint += 1;
        let ts = ctx.local_now();
        let mut out = Vec::new();
        for (id, lp) in &mut self.loops {
            lp.pv += self.config.plant.gain * (lp.u - lp.pv);
            if lp.members.is_empty() {
                continue;
            }
            let mut inputs = BTreeMap::new();
            inputs.insert(self.config.sensor.clone(), lp.pv);
            let pd = ProcessData { deployment_id: id.clone(), seq_hint: self.hint, inputs, timestamp: ts };
            ctx.note(Note::Sampled { deployment: id.clone(), hint: self.hint, ts });
            for m in &lp.members {
                out.push((*m, Message::ProcessData(pd.clone())));
            }
        }
        for (dst, msg) in out {
            transport::send(ctx, &self.config.policy, dst, &msg);
        }
        self.arm(ctx);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, msg: Message) {
        match msg {
            Message::DeployCmd(c) => self.on_deploy(c),
            Message::ControlData(c) => self.on_control(ctx, src, c),
            _ => {}
        }
    }

    fn on_deploy(&mut self, c: DeployCmd) {
        let lp = self.loops.entry(c.deployment_id).or_insert_with(|| Loop { pv: self.config.plant.initial, ..Loop::default() });
        let mut members: Vec<NodeId> = c.members.nodes().collect();
        members.sort();
        members.dedup();
        lp.members = members;
    }

    fn on_control(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, c: ControlData) {
        let Some(lp) = self.loops.get_mut(&c.deployment_id) else { return };
        let deployment = c.deployment_id.to_string();
        if lp.fence.offer((c.epoch, c.seq)) {
            lp.accepted += 1;
            if let Some(u) = c.outputs.get(&self.config.actuator) {
                lp.u = *u;
            }
            ctx.note(Note::Accepted { deployment, from: src, epoch: c.epoch, seq: c.seq });
        } else {
            lp.rejected += 1;
            ctx.note(Note::Rejected { deployment, from: src, epoch: c.epoch, seq: c.seq });
        }
    }
}
