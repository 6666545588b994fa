//! The data unit moved through the network.

use crate::net::NodeId;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PacketId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    /// Application payload carrying a per-flow sequence number.
    Data { seq: u64 },
    /// Cumulative acknowledgment: every data seq below `next_expected` has
    /// been received.
    Ack { next_expected: u64 },
}

#[derive(Debug, Clone)]
pub struct Packet {
    pub id: PacketId,
    pub flow: FlowId,
    pub src: NodeId,
    pub dst: NodeId,
    pub size_bytes: u32,
    pub created_at: SimTime,
    /// Stamped when the packet enters a queue; reset at every hop.
    pub enqueue_ts: SimTime,
    pub hop_budget: u32,
    pub hops_taken: u32,
    /// Hop distance from src to dst at injection time, when the pair was
    /// reachable.
    pub injected_hop_distance: Option<u32>,
    pub kind: PacketKind,
}

impl Packet {
    pub fn is_data(&self) -> bool {
        matches!(self.kind, PacketKind::Data { .. })
    }
}
