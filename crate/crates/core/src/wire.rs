//! Bit-exact message framing.
//!
//! Two header profiles share one body encoding:
//!
//! ```text
//! Compact (16 bytes)
//!   dst_addr[6] src_addr[6] type_tag[1] flags[1] body_len[2]
//! Routed (36 bytes)
//!   <compact header> version[1] ttl[1] header_checksum[2]
//!   src_route_addr[4] dst_route_addr[4] flow_label[4] reserved[4]
//! ```
//!
//! Multi-byte fields are big-endian. Link addresses are the low 48 bits of a
//! [`NodeId`], route addresses its low 32 bits. Bit 0 of `flags` selects the
//! profile; the remaining flag bits are zero. The checksum is the 16-bit
//! ones'-complement of the ones'-complement sum over the routing extension
//! with the checksum field zeroed.
//!
//! Decoding is canonical: a frame decodes successfully only if re-encoding
//! the result reproduces the frame bytes exactly.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Digest256;
use crate::model::{
    ControlData, DeploymentSpec, Epoch, ExecutionMode, Micros, NodeDescriptor, NodeId, NodeRole,
    ProcessData, ResourceDemand, SemVer, VpcState, VpfDescriptor,
};

pub const COMPACT_HEADER_LEN: usize = 16;
pub const ROUTING_EXT_LEN: usize = 20;
pub const ROUTED_HEADER_LEN: usize = COMPACT_HEADER_LEN + ROUTING_EXT_LEN;
pub const MAX_BODY_LEN: usize = u16::MAX as usize;

const FLAG_ROUTED: u8 = 0x01;
const ROUTED_VERSION: u8 = 1;
const ROUTED_TTL: u8 = 64;
const MAX_ADDR: u64 = 0xFFFF_FFFF_FFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameProfile {
    /// MAC-style framing, no routing information.
    Compact,
    /// Compact header plus a 20-byte routing extension.
    Routed,
}

pub fn frame_overhead(profile: FrameProfile) -> usize {
    match profile {
        FrameProfile::Compact => COMPACT_HEADER_LEN,
        FrameProfile::Routed => ROUTED_HEADER_LEN,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("body of {0} bytes exceeds 65535")]
    BodyTooLarge(usize),
    #[error("node id {0} does not fit a 48-bit link address")]
    AddressOutOfRange(NodeId),
    #[error("truncated frame: need {need} bytes, have {have}")]
    TruncatedFrame { need: usize, have: usize },
    #[error("routing header checksum mismatch")]
    BadChecksum,
    #[error("unknown type tag {0:#04x}")]
    UnknownTypeTag(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

// ---------------------------------------------------------------------------
// Message bodies
// ---------------------------------------------------------------------------

/// Who a deployment's members are, as known to the sender.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub active: NodeId,
    /// Inactive VPCs with their ranks.
    pub inactive: Vec<(NodeId, u8)>,
    /// Nodes that receive state synchronization without holding a rank
    /// (a new active waiting for a scheduled handover).
    pub followers: Vec<NodeId>,
}

impl Membership {
    pub fn contains(&self, node: NodeId) -> bool {
        self.active == node
            || self.inactive.iter().any(|(n, _)| *n == node)
            || self.followers.contains(&node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        core::iter::once(self.active)
            .chain(self.inactive.iter().map(|(n, _)| *n))
            .chain(self.followers.iter().copied())
    }
}

/// Configuration update: new epoch for the active and the member list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployCmd {
    pub deployment_id: String,
    pub epoch: Epoch,
    pub members: Membership,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromoteRole {
    Active,
    Inactive(u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromoteCmd {
    pub deployment_id: String,
    pub role: PromoteRole,
    /// The epoch the new node runs under (its own when active, the active's
    /// when inactive).
    pub epoch: Epoch,
    pub spec: DeploymentSpec,
    pub members: Membership,
    /// Set when the promoted active must wait for a scheduled handover.
    pub handover_at: Option<Micros>,
    /// Node that streams state to the promoted node, if not the active.
    pub state_source: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncMessage {
    pub deployment_id: String,
    pub epoch: Epoch,
    /// Sync slot number; slots are `sync_period` apart on the sender clock.
    pub slot: u64,
    /// Sender local clock at transmission.
    pub sent_at: Micros,
    pub seq: u64,
    /// Sensor sample counter of the last executed cycle.
    pub input_hint: u64,
    pub state_digest: Digest256,
    pub snapshot: Option<VpcState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncAck {
    pub deployment_id: String,
    pub epoch: Epoch,
    pub slot: u64,
    pub seq: u64,
    pub in_sync: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusKind {
    /// Reply to a discovery round.
    Report,
    /// All VPFs fetched and verified.
    Ready,
    /// Replicated state verified against the state source.
    InSync,
    /// Promotion aborted or a VPF faulted; the node is idle again.
    Fault,
    /// Unsolicited announcement after self-promotion.
    Promoted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusMessage {
    pub node_id: NodeId,
    /// Empty when the node belongs to no deployment.
    pub deployment_id: String,
    pub role: NodeRole,
    pub epoch: Epoch,
    pub seq: u64,
    /// Discovery round answered; 0 for unsolicited messages.
    pub round: u64,
    pub kind: StatusKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackupRequest {
    pub deployment_id: String,
    pub epoch: Epoch,
    /// The peer declared failed (an inactive, or the previous active after
    /// self-promotion).
    pub failed: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoverCmd {
    pub deployment_id: String,
    pub handover_time: Micros,
    pub old_active: NodeId,
    pub new_active: NodeId,
    pub new_epoch: Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseAction {
    Release,
    Disable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseCmd {
    pub deployment_id: String,
    pub action: ReleaseAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Message {
    Discovery { round: u64 },
    Register(NodeDescriptor),
    DeployCmd(DeployCmd),
    PromoteCmd(PromoteCmd),
    Sync(SyncMessage),
    SyncAck(SyncAck),
    Status(StatusMessage),
    ProcessData(ProcessData),
    ControlData(ControlData),
    BackupRequest(BackupRequest),
    HandoverCmd(HandoverCmd),
    ReleaseCmd(ReleaseCmd),
    FetchVpf { vpf_id: String, version: SemVer },
    /// `blob` is `None` when the registry has no such record.
    VpfBlob { vpf_id: String, version: SemVer, blob: Option<Vec<u8>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TypeTag {
    Discovery = 0x01,
    Register = 0x02,
    DeployCmd = 0x03,
    PromoteCmd = 0x04,
    Sync = 0x05,
    SyncAck = 0x06,
    Status = 0x07,
    ProcessData = 0x08,
    ControlData = 0x09,
    BackupRequest = 0x0A,
    HandoverCmd = 0x0B,
    ReleaseCmd = 0x0C,
    FetchVpf = 0x0D,
    VpfBlob = 0x0E,
}

impl TypeTag {
    pub const ALL: [TypeTag; 14] = [
        TypeTag::Discovery,
        TypeTag::Register,
        TypeTag::DeployCmd,
        TypeTag::PromoteCmd,
        TypeTag::Sync,
        TypeTag::SyncAck,
        TypeTag::Status,
        TypeTag::ProcessData,
        TypeTag::ControlData,
        TypeTag::BackupRequest,
        TypeTag::HandoverCmd,
        TypeTag::ReleaseCmd,
        TypeTag::FetchVpf,
        TypeTag::VpfBlob,
    ];

    pub fn from_u8(v: u8) -> Option<TypeTag> {
        TypeTag::ALL.get(v.wrapping_sub(1) as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TypeTag::Discovery => "discovery",
            TypeTag::Register => "register",
            TypeTag::DeployCmd => "deploy_cmd",
            TypeTag::PromoteCmd => "promote_cmd",
            TypeTag::Sync => "sync",
            TypeTag::SyncAck => "sync_ack",
            TypeTag::Status => "status",
            TypeTag::ProcessData => "process_data",
            TypeTag::ControlData => "control_data",
            TypeTag::BackupRequest => "backup_request",
            TypeTag::HandoverCmd => "handover_cmd",
            TypeTag::ReleaseCmd => "release_cmd",
            TypeTag::FetchVpf => "fetch_vpf",
            TypeTag::VpfBlob => "vpf_blob",
        }
    }
}

impl Message {
    pub fn tag(&self) -> TypeTag {
        match self {
            Message::Discovery { .. } => TypeTag::Discovery,
            Message::Register(_) => TypeTag::Register,
            Message::DeployCmd(_) => TypeTag::DeployCmd,
            Message::PromoteCmd(_) => TypeTag::PromoteCmd,
            Message::Sync(_) => TypeTag::Sync,
            Message::SyncAck(_) => TypeTag::SyncAck,
            Message::Status(_) => TypeTag::Status,
            Message::ProcessData(_) => TypeTag::ProcessData,
            Message::ControlData(_) => TypeTag::ControlData,
            Message::BackupRequest(_) => TypeTag::BackupRequest,
            Message::HandoverCmd(_) => TypeTag::HandoverCmd,
            Message::ReleaseCmd(_) => TypeTag::ReleaseCmd,
            Message::FetchVpf { .. } => TypeTag::FetchVpf,
            Message::VpfBlob { .. } => TypeTag::VpfBlob,
        }
    }
}

/// A decoded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub message: Message,
    pub profile: FrameProfile,
    pub src: NodeId,
    pub dst: NodeId,
}

/// Header fields readable without decoding the body.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeaderInfo {
    pub dst: NodeId,
    pub src: NodeId,
    pub type_tag: u8,
    pub profile: FrameProfile,
    pub body_len: usize,
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

pub fn encode(
    msg: &Message,
    profile: FrameProfile,
    src: NodeId,
    dst: NodeId,
) -> Result<Vec<u8>, WireError> {
    for id in [src, dst] {
        if id.0 > MAX_ADDR {
            return Err(WireError::AddressOutOfRange(id));
        }
    }
    let mut body = Writer::default();
    body.message(msg)?;
    let body = body.0;
    if body.len() > MAX_BODY_LEN {
        return Err(WireError::BodyTooLarge(body.len()));
    }

    let mut out = Vec::with_capacity(frame_overhead(profile) + body.len());
    out.extend_from_slice(&dst.0.to_be_bytes()[2..]);
    out.extend_from_slice(&src.0.to_be_bytes()[2..]);
    out.push(msg.tag() as u8);
    out.push(match profile {
        FrameProfile::Compact => 0,
        FrameProfile::Routed => FLAG_ROUTED,
    });
    out.extend_from_slice(&(body.len() as u16).to_be_bytes());
    if profile == FrameProfile::Routed {
        out.extend_from_slice(&routing_extension(msg.tag() as u8, src, dst));
    }
    out.extend_from_slice(&body);
    Ok(out)
}

fn routing_extension(tag: u8, src: NodeId, dst: NodeId) -> [u8; ROUTING_EXT_LEN] {
    let mut ext = [0u8; ROUTING_EXT_LEN];
    ext[0] = ROUTED_VERSION;
    ext[1] = ROUTED_TTL;
    ext[4..8].copy_from_slice(&(src.0 as u32).to_be_bytes());
    ext[8..12].copy_from_slice(&(dst.0 as u32).to_be_bytes());
    ext[12..16].copy_from_slice(&u32::from(tag).to_be_bytes());
    let sum = checksum(&ext);
    ext[2..4].copy_from_slice(&sum.to_be_bytes());
    ext
}

/// Ones'-complement checksum over `ext` with bytes 2..4 treated as zero.
fn checksum(ext: &[u8; ROUTING_EXT_LEN]) -> u16 {
    let mut sum: u32 = 0;
    for (i, pair) in ext.chunks_exact(2).enumerate() {
        if i == 1 {
            continue;
        }
        sum += u32::from(u16::from_be_bytes([pair[0], pair[1]]));
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn len(&mut self, n: usize) -> Result<(), WireError> {
        let n = u16::try_from(n).map_err(|_| WireError::BodyTooLarge(n))?;
        self.u16(n);
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<(), WireError> {
        self.len(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<(), WireError> {
        self.bytes(s.as_bytes())
    }
    fn node(&mut self, n: NodeId) {
        self.u64(n.0);
    }
    fn epoch(&mut self, e: Epoch) {
        self.u64(e.0);
    }
    fn digest(&mut self, d: &Digest256) {
        self.0.extend_from_slice(d.as_bytes());
    }
    fn version(&mut self, v: SemVer) {
        self.u16(v.major);
        self.u16(v.minor);
        self.u16(v.patch);
    }
    fn role(&mut self, r: NodeRole) {
        match r {
            NodeRole::IdleResource => self.u8(0),
            NodeRole::InactiveVpc(rank) => {
                self.u8(1);
                self.u8(rank);
            }
            NodeRole::ActiveVpc => self.u8(2),
            NodeRole::Disabled => self.u8(3),
        }
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                self.u64(v);
            }
        }
    }
    fn scalar_map(&mut self, m: &BTreeMap<String, f64>) -> Result<(), WireError> {
        self.len(m.len())?;
        for (k, v) in m {
            self.str(k)?;
            self.f64(*v);
        }
        Ok(())
    }
    fn members(&mut self, m: &Membership) -> Result<(), WireError> {
        self.node(m.active);
        self.len(m.inactive.len())?;
        for (n, rank) in &m.inactive {
            self.node(*n);
            self.u8(*rank);
        }
        self.len(m.followers.len())?;
        for n in &m.followers {
            self.node(*n);
        }
        Ok(())
    }
    fn vpf(&mut self, d: &VpfDescriptor) -> Result<(), WireError> {
        self.str(&d.vpf_id)?;
        self.version(d.version);
        match d.execution_mode {
            ExecutionMode::Cyclic { period } => {
                self.u8(0);
                self.u64(period);
            }
            ExecutionMode::Acyclic => self.u8(1),
        }
        self.str(&d.logic_name)?;
        self.str(&d.state_schema_id)?;
        self.digest(&d.artifact_digest);
        Ok(())
    }
    fn spec(&mut self, s: &DeploymentSpec) -> Result<(), WireError> {
        self.str(&s.deployment_id)?;
        self.len(s.vpfs.len())?;
        for v in &s.vpfs {
            self.vpf(v)?;
        }
        self.u8(s.redundancy_count);
        self.u64(s.sync_period);
        self.u32(s.miss_threshold);
        self.u64(s.control_period);
        self.u32(s.snapshot_every);
        self.u32(s.resources.cpu);
        self.u32(s.resources.mem);
        Ok(())
    }
    fn state(&mut self, s: &VpcState) -> Result<(), WireError> {
        self.u64(s.seq);
        self.len(s.vpf_states.len())?;
        for (k, v) in &s.vpf_states {
            self.str(k)?;
            self.bytes(v)?;
        }
        Ok(())
    }

    fn message(&mut self, msg: &Message) -> Result<(), WireError> {
        match msg {
            Message::Discovery { round } => self.u64(*round),
            Message::Register(d) => {
                self.node(d.node_id);
                self.u32(d.cpu_capacity);
                self.u32(d.mem_capacity);
                self.u64(d.link_latency_estimate);
                self.role(d.role);
                self.u64(d.last_seen);
                self.epoch(d.epoch);
            }
            Message::DeployCmd(c) => {
                self.str(&c.deployment_id)?;
                self.epoch(c.epoch);
                self.members(&c.members)?;
            }
            Message::PromoteCmd(c) => {
                self.str(&c.deployment_id)?;
                match c.role {
                    PromoteRole::Active => self.u8(0),
                    PromoteRole::Inactive(rank) => {
                        self.u8(1);
                        self.u8(rank);
                    }
                }
                self.epoch(c.epoch);
                self.spec(&c.spec)?;
                self.members(&c.members)?;
                self.opt_u64(c.handover_at);
                self.opt_u64(c.state_source.map(|n| n.0));
            }
            Message::Sync(s) => {
                self.str(&s.deployment_id)?;
                self.epoch(s.epoch);
                self.u64(s.slot);
                self.u64(s.sent_at);
                self.u64(s.seq);
                self.u64(s.input_hint);
                self.digest(&s.state_digest);
                match &s.snapshot {
                    None => self.u8(0),
                    Some(state) => {
                        self.u8(1);
                        self.state(state)?;
                    }
                }
            }
            Message::SyncAck(a) => {
                self.str(&a.deployment_id)?;
                self.epoch(a.epoch);
                self.u64(a.slot);
                self.u64(a.seq);
                self.bool(a.in_sync);
            }
            Message::Status(s) => {
                self.node(s.node_id);
                self.str(&s.deployment_id)?;
                self.role(s.role);
                self.epoch(s.epoch);
                self.u64(s.seq);
                self.u64(s.round);
                self.u8(match s.kind {
                    StatusKind::Report => 0,
                    StatusKind::Ready => 1,
                    StatusKind::InSync => 2,
                    StatusKind::Fault => 3,
                    StatusKind::Promoted => 4,
                });
            }
            Message::ProcessData(p) => {
                self.str(&p.deployment_id)?;
                self.u64(p.seq_hint);
                self.scalar_map(&p.inputs)?;
                self.u64(p.timestamp);
            }
            Message::ControlData(c) => {
                self.str(&c.deployment_id)?;
                self.epoch(c.epoch);
                self.u64(c.seq);
                self.scalar_map(&c.outputs)?;
            }
            Message::BackupRequest(b) => {
                self.str(&b.deployment_id)?;
                self.epoch(b.epoch);
                self.opt_u64(b.failed.map(|n| n.0));
            }
            Message::HandoverCmd(h) => {
                self.str(&h.deployment_id)?;
                self.u64(h.handover_time);
                self.node(h.old_active);
                self.node(h.new_active);
                self.epoch(h.new_epoch);
            }
            Message::ReleaseCmd(r) => {
                self.str(&r.deployment_id)?;
                self.u8(match r.action {
                    ReleaseAction::Release => 0,
                    ReleaseAction::Disable => 1,
                });
            }
            Message::FetchVpf { vpf_id, version } => {
                self.str(vpf_id)?;
                self.version(*version);
            }
            Message::VpfBlob { vpf_id, version, blob } => {
                self.str(vpf_id)?;
                self.version(*version);
                match blob {
                    None => self.u8(0),
                    Some(b) => {
                        self.u8(1);
                        self.bytes(b)?;
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Reads and validates the header. Does not look at the body.
pub fn decode_header(bytes: &[u8]) -> Result<HeaderInfo, WireError> {
    need(bytes, COMPACT_HEADER_LEN)?;
    let addr = |b: &[u8]| {
        let mut w = [0u8; 8];
        w[2..].copy_from_slice(b);
        NodeId(u64::from_be_bytes(w))
    };
    let dst = addr(&bytes[0..6]);
    let src = addr(&bytes[6..12]);
    let type_tag = bytes[12];
    let flags = bytes[13];
    if flags & !FLAG_ROUTED != 0 {
        return Err(WireError::Malformed("reserved flag bits set"));
    }
    let profile = if flags & FLAG_ROUTED != 0 { FrameProfile::Routed } else { FrameProfile::Compact };
    let body_len = usize::from(u16::from_be_bytes([bytes[14], bytes[15]]));
    if TypeTag::from_u8(type_tag).is_none() {
        return Err(WireError::UnknownTypeTag(type_tag));
    }
    if profile == FrameProfile::Routed {
        need(bytes, ROUTED_HEADER_LEN)?;
        let ext: &[u8; ROUTING_EXT_LEN] =
            bytes[COMPACT_HEADER_LEN..ROUTED_HEADER_LEN].try_into().expect("length checked");
        if u16::from_be_bytes([ext[2], ext[3]]) != checksum(ext) {
            return Err(WireError::BadChecksum);
        }
        if *ext != routing_extension(type_tag, src, dst) {
            return Err(WireError::Malformed("non-canonical routing extension"));
        }
    }
    Ok(HeaderInfo { dst, src, type_tag, profile, body_len })
}

/// Decodes one frame. Bytes past the declared body length are ignored.
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    decode_prefix(bytes).map(|(frame, _)| frame)
}

/// Like [`decode`], also returning the number of bytes the frame occupies.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    let header = decode_header(bytes)?;
    let start = frame_overhead(header.profile);
    let end = start + header.body_len;
    need(bytes, end)?;
    let tag = TypeTag::from_u8(header.type_tag).expect("validated in header");
    let mut r = Reader { buf: &bytes[start..end], pos: 0 };
    let message = r.message(tag)?;
    if r.pos != r.buf.len() {
        return Err(WireError::Malformed("trailing bytes inside body"));
    }
    Ok((
        Frame { message, profile: header.profile, src: header.src, dst: header.dst },
        end,
    ))
}

fn need(bytes: &[u8], n: usize) -> Result<(), WireError> {
    if bytes.len() < n {
        Err(WireError::TruncatedFrame { need: n, have: bytes.len() })
    } else {
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        // A body that ends early is inconsistent with its own length field.
        if self.buf.len() - self.pos < n {
            return Err(WireError::Malformed("body shorter than its fields"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Malformed("bool")),
        }
    }
    fn len(&mut self) -> Result<usize, WireError> {
        Ok(usize::from(self.u16()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.len()?;
        core::str::from_utf8(self.take(n)?)
            .map(String::from)
            .map_err(|_| WireError::Malformed("invalid utf-8"))
    }
    fn node(&mut self) -> Result<NodeId, WireError> {
        self.u64().map(NodeId)
    }
    fn epoch(&mut self) -> Result<Epoch, WireError> {
        self.u64().map(Epoch)
    }
    fn digest(&mut self) -> Result<Digest256, WireError> {
        Ok(Digest256(self.take(32)?.try_into().unwrap()))
    }
    fn version(&mut self) -> Result<SemVer, WireError> {
        Ok(SemVer { major: self.u16()?, minor: self.u16()?, patch: self.u16()? })
    }
    fn role(&mut self) -> Result<NodeRole, WireError> {
        Ok(match self.u8()? {
            0 => NodeRole::IdleResource,
            1 => NodeRole::InactiveVpc(self.u8()?),
            2 => NodeRole::ActiveVpc,
            3 => NodeRole::Disabled,
            _ => return Err(WireError::Malformed("role")),
        })
    }
    fn opt_u64(&mut self) -> Result<Option<u64>, WireError> {
        match self.u8()? {
            0 => Ok(None),
            1 => self.u64().map(Some),
            _ => Err(WireError::Malformed("option tag")),
        }
    }
    /// Keys must be strictly ascending so that decoding stays canonical.
    fn keyed<V>(
        &mut self,
        mut value: impl FnMut(&mut Self) -> Result<V, WireError>,
    ) -> Result<BTreeMap<String, V>, WireError> {
        let n = self.len()?;
        let mut map = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..n {
            let k = self.str()?;
            if last.as_ref().is_some_and(|l| *l >= k) {
                return Err(WireError::Malformed("map keys not ascending"));
            }
            let v = value(self)?;
            last = Some(k.clone());
            map.insert(k, v);
        }
        Ok(map)
    }
    fn members(&mut self) -> Result<Membership, WireError> {
        let active = self.node()?;
        let n = self.len()?;
        let mut inactive = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            inactive.push((self.node()?, self.u8()?));
        }
        let n = self.len()?;
        let mut followers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            followers.push(self.node()?);
        }
        Ok(Membership { active, inactive, followers })
    }
    fn vpf(&mut self) -> Result<VpfDescriptor, WireError> {
        Ok(VpfDescriptor {
            vpf_id: self.str()?,
            version: self.version()?,
            execution_mode: match self.u8()? {
                0 => ExecutionMode::Cyclic { period: self.u64()? },
                1 => ExecutionMode::Acyclic,
                _ => return Err(WireError::Malformed("execution mode")),
            },
            logic_name: self.str()?,
            state_schema_id: self.str()?,
            artifact_digest: self.digest()?,
        })
    }
    fn spec(&mut self) -> Result<DeploymentSpec, WireError> {
        let deployment_id = self.str()?;
        let n = self.len()?;
        let mut vpfs = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            vpfs.push(self.vpf()?);
        }
        Ok(DeploymentSpec {
            deployment_id,
            vpfs,
            redundancy_count: self.u8()?,
            sync_period: self.u64()?,
            miss_threshold: self.u32()?,
            control_period: self.u64()?,
            snapshot_every: self.u32()?,
            resources: ResourceDemand { cpu: self.u32()?, mem: self.u32()? },
        })
    }
    fn state(&mut self) -> Result<VpcState, WireError> {
        let seq = self.u64()?;
        let vpf_states = self.keyed(|r| r.bytes())?;
        Ok(VpcState { seq, vpf_states })
    }

    fn message(&mut self, tag: TypeTag) -> Result<Message, WireError> {
        Ok(match tag {
            TypeTag::Discovery => Message::Discovery { round: self.u64()? },
            TypeTag::Register => Message::Register(NodeDescriptor {
                node_id: self.node()?,
                cpu_capacity: self.u32()?,
                mem_capacity: self.u32()?,
                link_latency_estimate: self.u64()?,
                role: self.role()?,
                last_seen: self.u64()?,
                epoch: self.epoch()?,
            }),
            TypeTag::DeployCmd => Message::DeployCmd(DeployCmd {
                deployment_id: self.str()?,
                epoch: self.epoch()?,
                members: self.members()?,
            }),
            TypeTag::PromoteCmd => Message::PromoteCmd(PromoteCmd {
                deployment_id: self.str()?,
                role: match self.u8()? {
                    0 => PromoteRole::Active,
                    1 => PromoteRole::Inactive(self.u8()?),
                    _ => return Err(WireError::Malformed("promote role")),
                },
                epoch: self.epoch()?,
                spec: self.spec()?,
                members: self.members()?,
                handover_at: self.opt_u64()?,
                state_source: self.opt_u64()?.map(NodeId),
            }),
            TypeTag::Sync => Message::Sync(SyncMessage {
                deployment_id: self.str()?,
                epoch: self.epoch()?,
                slot: self.u64()?,
                sent_at: self.u64()?,
                seq: self.u64()?,
                input_hint: self.u64()?,
                state_digest: self.digest()?,
                snapshot: match self.u8()? {
                    0 => None,
                    1 => Some(self.state()?),
                    _ => return Err(WireError::Malformed("option tag")),
                },
            }),
            TypeTag::SyncAck => Message::SyncAck(SyncAck {
                deployment_id: self.str()?,
                epoch: self.epoch()?,
                slot: self.u64()?,
                seq: self.u64()?,
                in_sync: self.bool()?,
            }),
            TypeTag::Status => Message::Status(StatusMessage {
                node_id: self.node()?,
                deployment_id: self.str()?,
                role: self.role()?,
                epoch: self.epoch()?,
                seq: self.u64()?,
                round: self.u64()?,
                kind: match self.u8()? {
                    0 => StatusKind::Report,
                    1 => StatusKind::Ready,
                    2 => StatusKind::InSync,
                    3 => StatusKind::Fault,
                    4 => StatusKind::Promoted,
                    _ => return Err(WireError::Malformed("status kind")),
                },
            }),
            TypeTag::ProcessData => Message::ProcessData(ProcessData {
                deployment_id: self.str()?,
                seq_hint: self.u64()?,
                inputs: self.keyed(|r| r.f64())?,
                timestamp: self.u64()?,
            }),
            TypeTag::ControlData => Message::ControlData(ControlData {
                deployment_id: self.str()?,
                epoch: self.epoch()?,
                seq: self.u64()?,
                outputs: self.keyed(|r| r.f64())?,
            }),
            TypeTag::BackupRequest => Message::BackupRequest(BackupRequest {
                deployment_id: self.str()?,
                epoch: self.epoch()?,
                failed: self.opt_u64()?.map(NodeId),
            }),
            TypeTag::HandoverCmd => Message::HandoverCmd(HandoverCmd {
                deployment_id: self.str()?,
                handover_time: self.u64()?,
                old_active: self.node()?,
                new_active: self.node()?,
                new_epoch: self.epoch()?,
            }),
            TypeTag::ReleaseCmd => Message::ReleaseCmd(ReleaseCmd {
                deployment_id: self.str()?,
                action: match self.u8()? {
                    0 => ReleaseAction::Release,
                    1 => ReleaseAction::Disable,
                    _ => return Err(WireError::Malformed("release action")),
                },
            }),
            TypeTag::FetchVpf => Message::FetchVpf { vpf_id: self.str()?, version: self.version()? },
            TypeTag::VpfBlob => Message::VpfBlob {
                vpf_id: self.str()?,
                version: self.version()?,
                blob: match self.u8()? {
                    0 => None,
                    1 => Some(self.bytes()?),
                    _ => return Err(WireError::Malformed("option tag")),
                },
            },
        })
    }
}
