//! Aggregation-aware layer-2.5 forwarding: candidate next-hop sets with a
//! bounded-hop guarantee, per-next-hop timestamped queues, spare-space
//! accounting, aggregation-set eligibility, oldest-packet scheduling and
//! bandwidth-proportional splitting.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{ChannelId, HopMatrix, LinkId, NodeId, Topology};
use crate::packet::Packet;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueuePriority {
    /// Serve the queue whose head packet has waited longest (default).
    OldestHead,
    /// Serve the queue with the highest mean packet age.
    AvgAge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aal2rConfig {
    pub mtu_bytes: u32,
    pub header_bytes: u32,
    pub queue_priority: QueuePriority,
    pub hold_time_s: f64,
}

impl Aal2rConfig {
    pub fn payload_capacity(&self) -> u32 {
        self.mtu_bytes - self.header_bytes
    }
}

impl Default for Aal2rConfig {
    fn default() -> Self {
        Aal2rConfig {
            mtu_bytes: 1500,
            header_bytes: 28,
            queue_priority: QueuePriority::OldestHead,
            hold_time_s: 0.0,
        }
    }
}

/// Identifies one outgoing queue: a next hop reached over one channel. The
/// derived ordering (next hop first, then channel) is the tie-break order
/// everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct QueueKey {
    pub next_hop: NodeId,
    pub channel: ChannelId,
}

/// FIFO of packets bound for one next hop over one link. Packet enqueue
/// timestamps are non-decreasing front to back.
#[derive(Debug, Clone)]
pub struct NextHopQueue {
    pub next_hop: NodeId,
    pub link: LinkId,
    items: VecDeque<Packet>,
    total_payload_bytes: u64,
}

impl NextHopQueue {
    pub fn new(next_hop: NodeId, link: LinkId) -> NextHopQueue {
        NextHopQueue {
            next_hop,
            link,
            items: VecDeque::new(),
            total_payload_bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn head_enqueued_at(&self) -> Option<SimTime> {
        self.items.front().map(|p| p.enqueue_ts)
    }

    pub fn push(&mut self, packet: Packet) {
        debug_assert!(
            self.items
                .back()
                .map(|b| b.enqueue_ts <= packet.enqueue_ts)
                .unwrap_or(true),
            "enqueue timestamps must be non-decreasing"
        );
        self.total_payload_bytes += packet.size_bytes as u64;
        self.items.push_back(packet);
    }

    pub fn pop(&mut self) -> Option<Packet> {
        let p = self.items.pop_front()?;
        self.total_payload_bytes -= p.size_bytes as u64;
        Some(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Packet> {
        self.items.iter()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = Packet> + '_ {
        self.total_payload_bytes = 0;
        self.items.drain(..)
    }

    /// Remaining room in this queue's prospective transmission unit:
    /// MTU minus the queued payload bytes minus the frame header. Negative
    /// means the queue already holds more than one unit's worth.
    pub fn spare_space(&self, cfg: &Aal2rConfig) -> i64 {
        debug_assert_eq!(
            self.total_payload_bytes,
            self.iter().map(|p| p.size_bytes as u64).sum::<u64>()
        );
        cfg.mtu_bytes as i64 - self.total_payload_bytes as i64 - cfg.header_bytes as i64
    }

    pub fn mean_age_secs(&self, now: SimTime) -> Option<f64> {
        if self.items.is_empty() {
            return None;
        }
        let sum: f64 = self
            .items
            .iter()
            .map(|p| now.secs() - p.enqueue_ts.secs())
            .sum();
        Some(sum / self.items.len() as f64)
    }

    /// No further packet of any size can join the in-progress unit.
    pub fn unit_full(&self, cfg: &Aal2rConfig) -> bool {
        !self.is_empty() && self.spare_space(cfg) <= 0
    }
}

/// One aggregated frame: a header plus an ordered run of packets, at most
/// MTU bytes in total.
#[derive(Debug, Clone)]
pub struct TransmissionUnit {
    pub header_bytes: u32,
    pub packets: Vec<Packet>,
}

impl TransmissionUnit {
    pub fn total_bytes(&self) -> u64 {
        self.header_bytes as u64 + self.payload_bytes()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.packets.iter().map(|p| p.size_bytes as u64).sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssembleError {
    #[error("cannot assemble a transmission unit from an empty queue")]
    EmptyQueue,
}

/// Greedily dequeues from the head while the next packet still fits under
/// the MTU. The unit always carries at least one packet; the rest stay
/// queued in order.
pub fn assemble_unit(
    queue: &mut NextHopQueue,
    cfg: &Aal2rConfig,
) -> Result<TransmissionUnit, AssembleError> {
    if queue.is_empty() {
        return Err(AssembleError::EmptyQueue);
    }
    let mut packets = Vec::new();
    let mut payload: u64 = 0;
    while let Some(head) = queue.items.front() {
        let next = payload + head.size_bytes as u64;
        if !packets.is_empty() && cfg.header_bytes as u64 + next > cfg.mtu_bytes as u64 {
            break;
        }
        payload = next;
        packets.push(queue.pop().expect("head exists"));
    }
    debug_assert!(cfg.header_bytes as u64 + payload <= cfg.mtu_bytes as u64);
    Ok(TransmissionUnit {
        header_bytes: cfg.header_bytes,
        packets,
    })
}

/// Splits a received unit back into its packets, preserving order.
pub fn deaggregate(unit: TransmissionUnit) -> Vec<Packet> {
    unit.packets
}

/// A candidate next hop for some destination: one queue, one link, weighted
/// by the link rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub key: QueueKey,
    pub link: LinkId,
    pub weight_bps: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CandidateError {
    #[error("destination {0} unreachable")]
    NoRoute(NodeId),
}

/// The neighbors strictly one hop closer to the destination, one candidate
/// per live link to each. Restricting forwarding to these bounds every
/// delivered packet to the hop distance measured at its source.
pub fn candidate_next_hops(
    topo: &Topology,
    hops: &HopMatrix,
    from: NodeId,
    dst: NodeId,
) -> Result<Vec<Candidate>, CandidateError> {
    debug_assert_ne!(from, dst);
    let d = hops.get(from, dst).ok_or(CandidateError::NoRoute(dst))?;
    let mut out = Vec::new();
    for neighbor in topo.neighbors(from) {
        if hops.get(neighbor, dst) != Some(d - 1) {
            continue;
        }
        for link_id in topo.links_between(from, neighbor) {
            let link = topo.link(link_id);
            out.push(Candidate {
                key: QueueKey {
                    next_hop: neighbor,
                    channel: link.channel,
                },
                link: link_id,
                weight_bps: link.rate_bps,
            });
        }
    }
    out.sort_by_key(|c| c.key);
    debug_assert!(!out.is_empty(), "reachable destination implies a candidate");
    Ok(out)
}

/// Smooth weighted round-robin state for one (node, destination) pair.
/// Long-run selection frequency of each member converges to its weight
/// share; with a fixed eligible set the recurrence is exactly periodic.
#[derive(Debug, Clone, Default)]
pub struct SplitScheduler {
    weights: BTreeMap<QueueKey, i64>,
    credits: BTreeMap<QueueKey, i64>,
}

impl SplitScheduler {
    pub fn set_weight(&mut self, key: QueueKey, weight: i64) {
        self.weights.insert(key, weight);
        self.credits.entry(key).or_insert(0);
    }

    /// One smooth-WRR step over the eligible members: every eligible credit
    /// grows by its weight, the highest credit wins (ties to the lowest
    /// key), and the winner pays the eligible weight sum.
    pub fn pick(&mut self, eligible: &[QueueKey]) -> QueueKey {
        assert!(!eligible.is_empty(), "pick requires an eligible queue");
        let mut total: i64 = 0;
        for key in eligible {
            let w = *self.weights.get(key).expect("weight registered");
            *self.credits.get_mut(key).expect("credit registered") += w;
            total += w;
        }
        let mut winner = eligible[0];
        let mut best = i64::MIN;
        for &key in eligible {
            let c = self.credits[&key];
            if c > best {
                best = c;
                winner = key;
            }
        }
        *self.credits.get_mut(&winner).unwrap() -= total;
        winner
    }
}

#[derive(Debug)]
pub enum EnqueueOutcome {
    Enqueued(QueueKey),
    /// Chosen queue was at capacity; the packet is handed back for drop
    /// accounting.
    QueueFull(Packet),
}

/// Per-node AAL2R state: the per-(next hop, channel) queues and one split
/// scheduler per destination.
#[derive(Debug, Default)]
pub struct Aal2rNodeState {
    pub queues: BTreeMap<QueueKey, NextHopQueue>,
    schedulers: BTreeMap<NodeId, SplitScheduler>,
}

impl Aal2rNodeState {
    /// Drops all split state; used when the topology changes underneath.
    pub fn reset_schedulers(&mut self) {
        self.schedulers.clear();
    }

    /// Places one packet. The aggregation set is every candidate queue that
    /// is non-empty and has spare space for the packet; when that set is
    /// empty (all queues empty, or none has room) every candidate becomes
    /// eligible. The scheduler picks among the eligible queues and the
    /// packet is stamped and appended.
    pub fn enqueue_packet(
        &mut self,
        mut packet: Packet,
        candidates: &[Candidate],
        cfg: &Aal2rConfig,
        capacity_pkts: usize,
        now: SimTime,
    ) -> EnqueueOutcome {
        debug_assert!(!candidates.is_empty());
        for c in candidates {
            self.queues
                .entry(c.key)
                .or_insert_with(|| NextHopQueue::new(c.key.next_hop, c.link));
        }
        let scheduler = self.schedulers.entry(packet.dst).or_default();
        for c in candidates {
            scheduler.set_weight(c.key, c.weight_bps as i64);
        }

        let aggregation_set: Vec<QueueKey> = candidates
            .iter()
            .map(|c| c.key)
            .filter(|key| {
                let q = &self.queues[key];
                !q.is_empty() && q.spare_space(cfg) >= packet.size_bytes as i64
            })
            .collect();
        let eligible: Vec<QueueKey> = if aggregation_set.is_empty() {
            candidates.iter().map(|c| c.key).collect()
        } else {
            aggregation_set
        };

        let key = scheduler.pick(&eligible);
        let queue = self.queues.get_mut(&key).expect("candidate queue exists");
        if queue.len() >= capacity_pkts {
            return EnqueueOutcome::QueueFull(packet);
        }
        packet.enqueue_ts = now;
        queue.push(packet);
        EnqueueOutcome::Enqueued(key)
    }

    /// Picks the queue an idle radio on `channel` should serve, or `None`
    /// when nothing is ready. With a hold time configured, a queue is ready
    /// only once its head has waited out the hold or its unit can no longer
    /// grow.
    pub fn select_queue_for_radio(
        &self,
        channel: ChannelId,
        cfg: &Aal2rConfig,
        now: SimTime,
    ) -> Option<QueueKey> {
        let ready = self.ready_queues(channel, cfg, now);
        match cfg.queue_priority {
            QueuePriority::OldestHead => ready
                .into_iter()
                .min_by_key(|key| (self.queues[key].head_enqueued_at().unwrap(), *key)),
            QueuePriority::AvgAge => {
                let mut best: Option<(f64, QueueKey)> = None;
                for key in ready {
                    let age = self.queues[&key].mean_age_secs(now).unwrap();
                    let better = match best {
                        Some((b, _)) => age > b,
                        None => true,
                    };
                    if better {
                        best = Some((age, key));
                    }
                }
                best.map(|(_, key)| key)
            }
        }
    }

    fn ready_queues(&self, channel: ChannelId, cfg: &Aal2rConfig, now: SimTime) -> Vec<QueueKey> {
        self.queues
            .iter()
            .filter(|(key, q)| key.channel == channel && !q.is_empty())
            .filter(|(_, q)| {
                cfg.hold_time_s <= 0.0
                    || now.secs() - q.head_enqueued_at().unwrap().secs() >= cfg.hold_time_s
                    || q.unit_full(cfg)
            })
            .map(|(key, _)| *key)
            .collect()
    }

    /// Earliest time a currently held queue on `channel` becomes ready.
    pub fn next_hold_deadline(&self, channel: ChannelId, cfg: &Aal2rConfig) -> Option<SimTime> {
        if cfg.hold_time_s <= 0.0 {
            return None;
        }
        self.queues
            .iter()
            .filter(|(key, q)| key.channel == channel && !q.is_empty() && !q.unit_full(cfg))
            .map(|(_, q)| {
                SimTime::from_secs(q.head_enqueued_at().unwrap().secs() + cfg.hold_time_s)
            })
            .min()
    }

    pub fn has_traffic_on(&self, channel: ChannelId) -> bool {
        self.queues
            .iter()
            .any(|(key, q)| key.channel == channel && !q.is_empty())
    }
}
