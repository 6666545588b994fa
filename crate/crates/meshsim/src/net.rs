//! Network graph and the abstract multi-radio, multi-channel medium:
//! unit-disk connectivity, per-link serialization delay, per-channel
//! occupancy and finite interface queues.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelId(pub u16);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into [`Topology::links`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct RadioSpec {
    pub channel: ChannelId,
    pub rate_bps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub position: (f64, f64),
    pub radios: Vec<RadioSpec>,
}

/// An undirected link on one channel. Rate is the min of the endpoint radio
/// rates; `loss_prob` is an optional per-frame erasure probability.
#[derive(Debug, Clone)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub channel: ChannelId,
    pub rate_bps: u64,
    pub loss_prob: f64,
}

impl Link {
    pub fn other(&self, n: NodeId) -> NodeId {
        if n == self.a {
            self.b
        } else {
            debug_assert_eq!(n, self.b);
            self.a
        }
    }

    pub fn joins(&self, u: NodeId, v: NodeId) -> bool {
        (self.a == u && self.b == v) || (self.a == v && self.b == u)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("duplicate node id {0}")]
    DuplicateNodeId(NodeId),
    #[error("node {0} has no radios")]
    NoRadios(NodeId),
    #[error("node {0} has more than one radio on channel {1}")]
    DuplicateRadioChannel(NodeId, ChannelId),
    #[error("radio on node {0} channel {1} has zero rate")]
    ZeroRate(NodeId, ChannelId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
}

/// The network as an undirected graph. A link (i, j, c) exists iff the
/// Euclidean distance between i and j is at most the transmission range and
/// both carry a radio on channel c.
#[derive(Debug, Clone)]
pub struct Topology {
    nodes: BTreeMap<NodeId, NodeSpec>,
    links: Vec<Link>,
    up: Vec<bool>,
    by_node: BTreeMap<NodeId, Vec<LinkId>>,
    pub transmission_range_m: f64,
}

impl Topology {
    pub fn build(nodes: Vec<NodeSpec>, range_m: f64) -> Result<Topology, TopologyError> {
        let mut map = BTreeMap::new();
        for node in nodes {
            if node.radios.is_empty() {
                return Err(TopologyError::NoRadios(node.id));
            }
            let mut channels = BTreeSet::new();
            for r in &node.radios {
                if r.rate_bps == 0 {
                    return Err(TopologyError::ZeroRate(node.id, r.channel));
                }
                if !channels.insert(r.channel) {
                    return Err(TopologyError::DuplicateRadioChannel(node.id, r.channel));
                }
            }
            if map.insert(node.id, node.clone()).is_some() {
                return Err(TopologyError::DuplicateNodeId(node.id));
            }
        }

        let mut topo = Topology {
            nodes: map,
            links: Vec::new(),
            up: Vec::new(),
            by_node: BTreeMap::new(),
            transmission_range_m: range_m,
        };
        for id in topo.nodes.keys() {
            topo.by_node.insert(*id, Vec::new());
        }

        let ids: Vec<NodeId> = topo.nodes.keys().copied().collect();
        for (i, &u) in ids.iter().enumerate() {
            for &v in &ids[i + 1..] {
                let nu = &topo.nodes[&u];
                let nv = &topo.nodes[&v];
                let dx = nu.position.0 - nv.position.0;
                let dy = nu.position.1 - nv.position.1;
                // squared compare keeps the "exactly at range" boundary exact
                if dx * dx + dy * dy > range_m * range_m {
                    continue;
                }
                for ru in &nu.radios {
                    for rv in &nv.radios {
                        if ru.channel == rv.channel {
                            let id = LinkId(topo.links.len() as u32);
                            topo.links.push(Link {
                                a: u,
                                b: v,
                                channel: ru.channel,
                                rate_bps: ru.rate_bps.min(rv.rate_bps),
                                loss_prob: 0.0,
                            });
                            topo.up.push(true);
                            topo.by_node.get_mut(&u).unwrap().push(id);
                            topo.by_node.get_mut(&v).unwrap().push(id);
                        }
                    }
                }
            }
        }
        Ok(topo)
    }

    pub fn set_loss_prob(&mut self, p: f64) {
        for link in &mut self.links {
            link.loss_prob = p;
        }
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id.0 as usize]
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn is_up(&self, id: LinkId) -> bool {
        self.up[id.0 as usize]
    }

    pub fn set_up(&mut self, id: LinkId, up: bool) {
        self.up[id.0 as usize] = up;
    }

    pub fn links_of(&self, n: NodeId) -> &[LinkId] {
        self.by_node.get(&n).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Live links joining u and v, lowest channel first.
    pub fn links_between(&self, u: NodeId, v: NodeId) -> Vec<LinkId> {
        let mut out: Vec<LinkId> = self
            .links_of(u)
            .iter()
            .copied()
            .filter(|&l| self.is_up(l) && self.link(l).joins(u, v))
            .collect();
        out.sort_by_key(|&l| self.link(l).channel);
        out
    }

    /// The link GSR forwarding uses for a neighbor pair: lowest channel id.
    pub fn lowest_link_between(&self, u: NodeId, v: NodeId) -> Option<LinkId> {
        self.links_between(u, v).into_iter().next()
    }

    pub fn channels(&self) -> BTreeSet<ChannelId> {
        self.links.iter().map(|l| l.channel).collect()
    }

    /// Channel-agnostic adjacency over live links.
    pub fn neighbors(&self, n: NodeId) -> BTreeSet<NodeId> {
        self.links_of(n)
            .iter()
            .filter(|&&l| self.is_up(l))
            .map(|&l| self.link(l).other(n))
            .collect()
    }

    /// Breadth-first hop counts from `from` over live links.
    pub fn bfs_distances(&self, from: NodeId) -> BTreeMap<NodeId, u32> {
        let mut dist = BTreeMap::new();
        dist.insert(from, 0);
        let mut queue = VecDeque::from([from]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for v in self.neighbors(u) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Minimum link count on any u-v path; `None` when disconnected.
    pub fn hop_distance(&self, u: NodeId, v: NodeId) -> Result<Option<u32>, TopologyError> {
        if !self.nodes.contains_key(&u) {
            return Err(TopologyError::UnknownNode(u));
        }
        if !self.nodes.contains_key(&v) {
            return Err(TopologyError::UnknownNode(v));
        }
        Ok(self.bfs_distances(u).get(&v).copied())
    }
}

/// Precomputed all-pairs hop counts used as the oracle view of a static
/// topology.
#[derive(Debug, Clone)]
pub struct HopMatrix {
    dist: BTreeMap<NodeId, BTreeMap<NodeId, u32>>,
}

impl HopMatrix {
    pub fn compute(topo: &Topology) -> HopMatrix {
        let mut dist = BTreeMap::new();
        for u in topo.node_ids() {
            dist.insert(u, topo.bfs_distances(u));
        }
        HopMatrix { dist }
    }

    pub fn get(&self, u: NodeId, v: NodeId) -> Option<u32> {
        self.dist.get(&u).and_then(|m| m.get(&v)).copied()
    }
}

/// Seconds a frame of `bytes` occupies a link of `rate_bps`.
pub fn serialization_delay(bytes: u64, rate_bps: u64) -> SimTime {
    SimTime::from_secs(bytes as f64 * 8.0 / rate_bps as f64)
}

/// One shared medium per channel: at most one frame in flight network-wide,
/// grants handed out in request order.
#[derive(Debug, Clone)]
pub struct ChannelMedium {
    pub channel: ChannelId,
    pub busy_until: SimTime,
}

impl ChannelMedium {
    pub fn new(channel: ChannelId) -> ChannelMedium {
        ChannelMedium {
            channel,
            busy_until: SimTime::ZERO,
        }
    }

    /// Reserves the next slot at or after `at`; returns (start, end).
    pub fn reserve(&mut self, at: SimTime, duration: SimTime) -> (SimTime, SimTime) {
        let start = at.max(self.busy_until);
        let end = start + duration;
        self.busy_until = end;
        (start, end)
    }
}

/// Bounded FIFO of pending frames on one outgoing link. Overflow tail-drops.
#[derive(Debug, Clone)]
pub struct InterfaceQueue<T> {
    pub next_hop: NodeId,
    pub link: LinkId,
    capacity: usize,
    items: VecDeque<(T, SimTime)>,
}

impl<T> InterfaceQueue<T> {
    pub fn new(next_hop: NodeId, link: LinkId, capacity: usize) -> InterfaceQueue<T> {
        InterfaceQueue {
            next_hop,
            link,
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Tail-drop: a full queue rejects the item and hands it back.
    pub fn push(&mut self, item: T, now: SimTime) -> Result<(), T> {
        if self.items.len() >= self.capacity {
            return Err(item);
        }
        self.items.push_back((item, now));
        Ok(())
    }

    pub fn pop(&mut self) -> Option<(T, SimTime)> {
        self.items.pop_front()
    }

    pub fn head_enqueued_at(&self) -> Option<SimTime> {
        self.items.front().map(|(_, t)| *t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(T, SimTime)> {
        self.items.iter()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = (T, SimTime)> + '_ {
        self.items.drain(..)
    }
}
