//! Global State Routing: per-node neighbor list, topology table, next-hop
//! table and distance table, maintained by periodic full-table exchange with
//! neighbors only. Routes are hop-count shortest paths.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::net::NodeId;
use crate::packet::Packet;
use crate::sim::SimTime;

/// One origin's link state as known locally.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkStateEntry {
    pub origin: NodeId,
    pub neighbors: BTreeSet<NodeId>,
    /// Monotone counter owned by the origin; strictly increases per update.
    pub sequence: u64,
    /// Time of the last local change to this entry.
    pub timestamp: SimTime,
}

/// Full-table update flooded one hop to each neighbor.
#[derive(Debug, Clone)]
pub struct RoutingUpdateMessage {
    pub sender: NodeId,
    pub entries: Vec<LinkStateEntry>,
}

impl RoutingUpdateMessage {
    /// Fixed accounting rule for control-plane cost.
    pub fn wire_size_bytes(&self) -> u64 {
        8 + 12 * self.entries.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardDecision {
    /// Destination is this node.
    Deliver,
    Forward(NodeId),
    NoRoute,
    HopBudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct GsrTables {
    pub node_id: NodeId,
    pub neighbor_list: BTreeSet<NodeId>,
    pub topology_table: BTreeMap<NodeId, LinkStateEntry>,
    pub next_hop_table: BTreeMap<NodeId, NodeId>,
    pub distance_table: BTreeMap<NodeId, u32>,
}

impl GsrTables {
    /// Fresh tables knowing only this node's own adjacency.
    pub fn new(node_id: NodeId, neighbors: BTreeSet<NodeId>) -> GsrTables {
        let mut topology_table = BTreeMap::new();
        topology_table.insert(
            node_id,
            LinkStateEntry {
                origin: node_id,
                neighbors: neighbors.clone(),
                sequence: 0,
                timestamp: SimTime::ZERO,
            },
        );
        GsrTables {
            node_id,
            neighbor_list: neighbors,
            topology_table,
            next_hop_table: BTreeMap::new(),
            distance_table: BTreeMap::from([(node_id, 0)]),
        }
    }

    fn self_entry_mut(&mut self) -> &mut LinkStateEntry {
        let id = self.node_id;
        self.topology_table
            .get_mut(&id)
            .expect("self entry present")
    }

    /// Bumps the own sequence number and snapshots the whole topology table
    /// for broadcast. The caller sends one copy per neighbor.
    pub fn periodic_update(&mut self, now: SimTime) -> RoutingUpdateMessage {
        let entry = self.self_entry_mut();
        entry.sequence += 1;
        entry.timestamp = now;
        RoutingUpdateMessage {
            sender: self.node_id,
            entries: self.topology_table.values().cloned().collect(),
        }
    }

    /// Merges a received update. An entry replaces the local copy only when
    /// its sequence is strictly greater; stale entries are ignored. Routes
    /// are recomputed when anything changed. Returns whether it did.
    pub fn handle_update(&mut self, msg: &RoutingUpdateMessage, now: SimTime) -> bool {
        let mut changed = false;
        for incoming in &msg.entries {
            let accept = match self.topology_table.get(&incoming.origin) {
                Some(local) => incoming.sequence > local.sequence,
                None => true,
            };
            if accept {
                let mut entry = incoming.clone();
                entry.timestamp = now;
                self.topology_table.insert(entry.origin, entry);
                changed = true;
            }
        }
        if changed {
            self.recompute_routes();
        }
        changed
    }

    /// Reflects a local adjacency change (scripted link event): the own
    /// entry gets a fresh sequence so neighbors pick it up on the next
    /// exchange.
    pub fn set_local_adjacency(&mut self, neighbors: BTreeSet<NodeId>, now: SimTime) {
        self.neighbor_list = neighbors.clone();
        let entry = self.self_entry_mut();
        entry.neighbors = neighbors;
        entry.sequence += 1;
        entry.timestamp = now;
        self.recompute_routes();
    }

    /// Shortest paths by hop count over the union of known link states.
    /// Equal-cost routes resolve to the lowest next-hop id; unreachable
    /// destinations are absent from both tables.
    pub fn recompute_routes(&mut self) {
        let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for entry in self.topology_table.values() {
            for &n in &entry.neighbors {
                adjacency.entry(entry.origin).or_default().insert(n);
                adjacency.entry(n).or_default().insert(entry.origin);
            }
        }

        let mut dist: BTreeMap<NodeId, u32> = BTreeMap::from([(self.node_id, 0)]);
        let mut order: Vec<NodeId> = vec![self.node_id];
        let mut queue = VecDeque::from([self.node_id]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            if let Some(nbrs) = adjacency.get(&u) {
                for &v in nbrs {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                        e.insert(du + 1);
                        order.push(v);
                        queue.push_back(v);
                    }
                }
            }
        }

        // second pass: first hop = min over optimal predecessors
        let mut next_hop: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for &v in &order {
            let dv = dist[&v];
            if dv == 0 {
                continue;
            }
            if dv == 1 {
                next_hop.insert(v, v);
                continue;
            }
            let best = adjacency
                .get(&v)
                .into_iter()
                .flatten()
                .filter(|u| dist.get(u) == Some(&(dv - 1)))
                .filter_map(|u| next_hop.get(u))
                .min()
                .copied();
            if let Some(h) = best {
                next_hop.insert(v, h);
            }
        }

        dist.remove(&self.node_id);
        self.distance_table = dist;
        self.distance_table.insert(self.node_id, 0);
        self.next_hop_table = next_hop;
    }

    /// Routing-table lookup for one packet. Decrements the hop budget on a
    /// forward decision.
    pub fn forward(&self, packet: &mut Packet) -> ForwardDecision {
        if packet.dst == self.node_id {
            return ForwardDecision::Deliver;
        }
        if packet.hop_budget == 0 {
            return ForwardDecision::HopBudgetExhausted;
        }
        match self.next_hop_table.get(&packet.dst) {
            Some(&nh) => {
                packet.hop_budget -= 1;
                ForwardDecision::Forward(nh)
            }
            None => ForwardDecision::NoRoute,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{FlowId, PacketId, PacketKind};

    fn ids(ns: &[u32]) -> BTreeSet<NodeId> {
        ns.iter().map(|&n| NodeId(n)).collect()
    }

    fn packet(dst: u32, budget: u32) -> Packet {
        Packet {
            id: PacketId(0),
            flow: FlowId(0),
            src: NodeId(0),
            dst: NodeId(dst),
            size_bytes: 512,
            created_at: SimTime::ZERO,
            enqueue_ts: SimTime::ZERO,
            hop_budget: budget,
            hops_taken: 0,
            injected_hop_distance: None,
            kind: PacketKind::Data { seq: 0 },
        }
    }

    #[test]
    fn init_isolated_node() {
        let t = GsrTables::new(NodeId(4), BTreeSet::new());
        assert!(t.neighbor_list.is_empty());
        assert_eq!(t.distance_table, BTreeMap::from([(NodeId(4), 0)]));
        assert!(t.next_hop_table.is_empty());
        assert_eq!(t.topology_table.len(), 1);
        assert_eq!(t.topology_table[&NodeId(4)].sequence, 0);
    }

    #[test]
    fn init_records_neighbors() {
        let t = GsrTables::new(NodeId(0), ids(&[2, 5]));
        assert_eq!(t.neighbor_list, ids(&[2, 5]));
    }

    #[test]
    fn periodic_update_increments_sequence_and_sizes() {
        let mut t = GsrTables::new(NodeId(0), ids(&[1]));
        let m1 = t.periodic_update(SimTime::from_secs(1.0));
        let m2 = t.periodic_update(SimTime::from_secs(2.0));
        assert_eq!(m1.entries[0].sequence, 1);
        assert_eq!(m2.entries[0].sequence, 2);
        // every update carries the sender's own entry
        assert!(m1.entries.iter().any(|e| e.origin == NodeId(0)));
        // 10 entries -> 8 + 12*10 bytes
        let msg = RoutingUpdateMessage {
            sender: NodeId(0),
            entries: (0..10)
                .map(|i| LinkStateEntry {
                    origin: NodeId(i),
                    neighbors: BTreeSet::new(),
                    sequence: 0,
                    timestamp: SimTime::ZERO,
                })
                .collect(),
        };
        assert_eq!(msg.wire_size_bytes(), 128);
    }

    #[test]
    fn handle_update_strict_sequence_rule() {
        let mut t = GsrTables::new(NodeId(0), ids(&[1]));
        let entry = |seq, nbrs: &[u32]| LinkStateEntry {
            origin: NodeId(7),
            neighbors: ids(nbrs),
            sequence: seq,
            timestamp: SimTime::ZERO,
        };
        let msg = |seq, nbrs: &[u32]| RoutingUpdateMessage {
            sender: NodeId(1),
            entries: vec![entry(seq, nbrs)],
        };
        assert!(t.handle_update(&msg(5, &[1]), SimTime::from_secs(1.0)));
        assert_eq!(t.topology_table[&NodeId(7)].sequence, 5);
        // same sequence ignored
        assert!(!t.handle_update(&msg(5, &[1, 2]), SimTime::from_secs(2.0)));
        assert_eq!(t.topology_table[&NodeId(7)].neighbors, ids(&[1]));
        // strictly greater replaces
        assert!(t.handle_update(&msg(7, &[1, 2]), SimTime::from_secs(3.0)));
        assert_eq!(t.topology_table[&NodeId(7)].neighbors, ids(&[1, 2]));
        assert_eq!(
            t.topology_table[&NodeId(7)].timestamp,
            SimTime::from_secs(3.0)
        );
    }

    #[test]
    fn merge_is_idempotent() {
        let mut t = GsrTables::new(NodeId(0), ids(&[1]));
        let msg = RoutingUpdateMessage {
            sender: NodeId(1),
            entries: vec![LinkStateEntry {
                origin: NodeId(1),
                neighbors: ids(&[0, 2]),
                sequence: 3,
                timestamp: SimTime::ZERO,
            }],
        };
        t.handle_update(&msg, SimTime::from_secs(1.0));
        let snapshot = (
            t.topology_table.clone(),
            t.next_hop_table.clone(),
            t.distance_table.clone(),
        );
        assert!(!t.handle_update(&msg, SimTime::from_secs(2.0)));
        assert_eq!(snapshot.0, t.topology_table);
        assert_eq!(snapshot.1, t.next_hop_table);
        assert_eq!(snapshot.2, t.distance_table);
    }

    fn line_tables_at_a() -> GsrTables {
        // A(0) - B(1) - C(2), as seen from A once B's state arrived
        let mut t = GsrTables::new(NodeId(0), ids(&[1]));
        t.handle_update(
            &RoutingUpdateMessage {
                sender: NodeId(1),
                entries: vec![LinkStateEntry {
                    origin: NodeId(1),
                    neighbors: ids(&[0, 2]),
                    sequence: 1,
                    timestamp: SimTime::ZERO,
                }],
            },
            SimTime::from_secs(1.0),
        );
        t
    }

    #[test]
    fn routes_on_a_line() {
        let t = line_tables_at_a();
        assert_eq!(t.next_hop_table[&NodeId(2)], NodeId(1));
        assert_eq!(t.distance_table[&NodeId(2)], 2);
    }

    #[test]
    fn equal_cost_tie_breaks_to_lowest_next_hop() {
        // 0 adjacent to 3 and 7; both adjacent to 9
        let mut t = GsrTables::new(NodeId(0), ids(&[3, 7]));
        for origin in [3u32, 7] {
            t.handle_update(
                &RoutingUpdateMessage {
                    sender: NodeId(origin),
                    entries: vec![LinkStateEntry {
                        origin: NodeId(origin),
                        neighbors: ids(&[0, 9]),
                        sequence: 1,
                        timestamp: SimTime::ZERO,
                    }],
                },
                SimTime::from_secs(1.0),
            );
        }
        assert_eq!(t.next_hop_table[&NodeId(9)], NodeId(3));
    }

    #[test]
    fn forward_decisions() {
        let t = line_tables_at_a();
        let mut to_self = packet(0, 8);
        assert_eq!(t.forward(&mut to_self), ForwardDecision::Deliver);

        let mut unknown = packet(42, 8);
        assert_eq!(t.forward(&mut unknown), ForwardDecision::NoRoute);

        let mut exhausted = packet(2, 0);
        assert_eq!(
            t.forward(&mut exhausted),
            ForwardDecision::HopBudgetExhausted
        );

        let mut ok = packet(2, 8);
        assert_eq!(t.forward(&mut ok), ForwardDecision::Forward(NodeId(1)));
        assert_eq!(ok.hop_budget, 7);
    }

    // independent BFS oracle over an explicit edge list
    fn oracle_distances(n: u32, edges: &[(u32, u32)], src: u32) -> BTreeMap<NodeId, u32> {
        let mut dist = BTreeMap::from([(NodeId(src), 0u32)]);
        let mut frontier = vec![src];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &u in &frontier {
                for &(a, b) in edges {
                    let v = if a == u {
                        b
                    } else if b == u {
                        a
                    } else {
                        continue;
                    };
                    if v < n && !dist.contains_key(&NodeId(v)) {
                        dist.insert(NodeId(v), dist[&NodeId(u)] + 1);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    #[test]
    fn routes_match_bfs_oracle_on_random_connected_graphs() {
        let mut rng = crate::sim::RandomStream::new(99);
        let mut done = 0;
        while done < 100 {
            let n = 3 + (rng.next_u64() % 13) as u32; // <= 15 nodes
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.next_f64() < 0.35 {
                        edges.push((a, b));
                    }
                }
            }
            let oracle0 = oracle_distances(n, &edges, 0);
            if oracle0.len() != n as usize {
                continue; // not connected, resample
            }
            done += 1;

            for node in 0..n {
                let neighbors: BTreeSet<NodeId> = edges
                    .iter()
                    .filter_map(|&(a, b)| {
                        if a == node {
                            Some(NodeId(b))
                        } else if b == node {
                            Some(NodeId(a))
                        } else {
                            None
                        }
                    })
                    .collect();
                let mut t = GsrTables::new(NodeId(node), neighbors);
                // feed every origin's true link state
                for origin in 0..n {
                    let entry_nbrs: BTreeSet<NodeId> = edges
                        .iter()
                        .filter_map(|&(a, b)| {
                            if a == origin {
                                Some(NodeId(b))
                            } else if b == origin {
                                Some(NodeId(a))
                            } else {
                                None
                            }
                        })
                        .collect();
                    t.handle_update(
                        &RoutingUpdateMessage {
                            sender: NodeId(origin),
                            entries: vec![LinkStateEntry {
                                origin: NodeId(origin),
                                neighbors: entry_nbrs,
                                sequence: 1,
                                timestamp: SimTime::ZERO,
                            }],
                        },
                        SimTime::ZERO,
                    );
                }
                let oracle = oracle_distances(n, &edges, node);
                assert_eq!(t.distance_table, oracle, "node {node}, edges {edges:?}");
                for (&d, &nh) in &t.next_hop_table {
                    let od = oracle_distances(n, &edges, nh.0);
                    assert_eq!(
                        1 + od[&d],
                        oracle[&d],
                        "next hop {nh} off a shortest path to {d}"
                    );
                }
            }
        }
    }
}
