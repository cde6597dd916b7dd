//! Glue between components and the simulator: picks a frame profile per
//! message and turns encode/decode failures into trace notes.

use alloc::string::ToString;

use serde::{Deserialize, Serialize};

use crate::model::NodeId;
use crate::note::Note;
use crate::simnet::Ctx;
use crate::wire::{self, FrameProfile, Message, TypeTag};

/// Which header profile each class of traffic uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePolicy {
    /// Process data, control data, sync and acks.
    pub data: FrameProfile,
    /// Everything else.
    pub management: FrameProfile,
}

impl Default for FramePolicy {
    fn default() -> Self {
        FramePolicy { data: FrameProfile::Compact, management: FrameProfile::Routed }
    }
}

impl FramePolicy {
    pub fn uniform(profile: FrameProfile) -> Self {
        FramePolicy { data: profile, management: profile }
    }

    pub fn profile_for(&self, tag: TypeTag) -> FrameProfile {
        match tag {
            TypeTag::ProcessData | TypeTag::ControlData | TypeTag::Sync | TypeTag::SyncAck => self.data,
            _ => self.management,
        }
    }
}

pub fn send(ctx: &mut Ctx<'_, Note>, policy: &FramePolicy, dst: NodeId, msg: &Message) {
    send_addressed(ctx, policy, dst, dst, msg);
}

/// Sends over the link to `dst` with the broadcast address in the header.
pub fn broadcast(ctx: &mut Ctx<'_, Note>, policy: &FramePolicy, dst: NodeId, msg: &Message) {
    send_addressed(ctx, policy, dst, NodeId::BROADCAST, msg);
}

fn send_addressed(ctx: &mut Ctx<'_, Note>, policy: &FramePolicy, dst: NodeId, header_dst: NodeId, msg: &Message) {
    match wire::encode(msg, policy.profile_for(msg.tag()), ctx.node(), header_dst) {
        Ok(frame) => ctx.send(dst, frame),
        Err(error) => ctx.note(Note::WireError { peer: dst, error: error.to_string() }),
    }
}

/// Decodes an inbound frame, noting and discarding anything malformed.
pub fn open(ctx: &mut Ctx<'_, Note>, src: NodeId, frame: &[u8]) -> Option<Message> {
    match wire::decode(frame) {
        Ok(f) => Some(f.message),
        Err(error) => {
            ctx.note(Note::WireError { peer: src, error: error.to_string() });
            None
        }
    }
}
