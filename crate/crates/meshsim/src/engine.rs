//! Event-driven execution of one scenario: wires the clock, medium, routers,
//! flows and counters together and enforces the run-level invariants.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::aal2r::{
    assemble_unit, candidate_next_hops, deaggregate, Aal2rConfig, Aal2rNodeState, EnqueueOutcome,
    QueueKey, TransmissionUnit,
};
use crate::gsr::{ForwardDecision, GsrTables, RoutingUpdateMessage};
use crate::metrics::{check_conservation, Counters, TimeSeries};
use crate::net::{
    serialization_delay, ChannelId, ChannelMedium, HopMatrix, InterfaceQueue, LinkId, NodeId,
    Topology,
};
use crate::packet::{FlowId, Packet, PacketId, PacketKind};
use crate::report::{MetricsSummary, Report};
use crate::scenario::{FlowDef, FlowKind, LinkAction, Protocol, Scenario, ScenarioError};
use crate::sim::{RandomStream, Scheduler, SimTime, StreamFactory};
use crate::traffic::{
    cbr_injection_at, DeliveryLedger, ReliableReceiver, ReliableSender, ACK_BYTES,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scenario rejected: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub protocol: Option<Protocol>,
    pub seed: Option<u64>,
    pub record_tx_log: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Data,
    Control,
}

/// One packet inside a logged frame.
#[derive(Debug, Clone)]
pub struct TxPacket {
    pub flow: FlowId,
    pub size_bytes: u32,
    pub dst: NodeId,
    pub is_data: bool,
    /// Payload sequence number; data packets only.
    pub data_seq: Option<u64>,
}

/// One medium occupancy interval, for audits of the channel model.
#[derive(Debug, Clone)]
pub struct TxRecord {
    pub channel: ChannelId,
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub requested_at: SimTime,
    pub start: SimTime,
    pub end: SimTime,
    pub frame_bytes: u64,
    pub payload_bytes: u64,
    pub packets: Vec<TxPacket>,
    pub rate_bps: u64,
    pub kind: FrameKind,
}

pub struct RunOutput {
    pub report: Report,
    pub tx_log: Vec<TxRecord>,
}

/// Runs a scenario to completion and returns its report.
pub fn run_scenario(sc: &Scenario) -> Result<Report, EngineError> {
    run_scenario_with(sc, &RunOptions::default()).map(|out| out.report)
}

pub fn run_scenario_with(sc: &Scenario, opts: &RunOptions) -> Result<RunOutput, EngineError> {
    let mut sc = sc.clone();
    if let Some(p) = opts.protocol {
        sc.protocol = p;
    }
    if let Some(s) = opts.seed {
        sc.seed = s;
    }
    sc.validate()?;
    let mut engine = Engine::new(sc, opts.record_tx_log)?;
    engine.run()
}

/// Runs a GSR scenario to its full duration and returns every node's final
/// routing tables, for convergence studies.
pub fn gsr_tables_after_run(sc: &Scenario) -> Result<BTreeMap<NodeId, GsrTables>, EngineError> {
    let mut sc = sc.clone();
    sc.protocol = Protocol::Gsr;
    sc.validate()?;
    let mut engine = Engine::new(sc, false)?;
    engine.run()?;
    let mut out = BTreeMap::new();
    for (&id, state) in &engine.nodes {
        if let RouterState::Gsr { tables, .. } = &state.router {
            out.insert(id, tables.clone());
        }
    }
    Ok(out)
}

enum Frame {
    Data(TransmissionUnit),
    Control(RoutingUpdateMessage),
}

impl Frame {
    fn bytes(&self) -> u64 {
        match self {
            Frame::Data(unit) => unit.total_bytes(),
            Frame::Control(msg) => msg.wire_size_bytes(),
        }
    }
}

enum GsrItem {
    Data(Packet),
    Control(RoutingUpdateMessage),
}

enum RouterState {
    Gsr {
        tables: GsrTables,
        queues: BTreeMap<QueueKey, InterfaceQueue<GsrItem>>,
    },
    Aal2r(Aal2rNodeState),
}

struct NodeState {
    router: RouterState,
    radio_busy: BTreeMap<ChannelId, bool>,
}

struct InAir {
    frame: Frame,
    link: LinkId,
    from: NodeId,
    to: NodeId,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    CbrInject { flow: usize, k: u64 },
    ReliableStart { flow: usize },
    RtoTimer { flow: usize, gen: u64 },
    GsrBroadcast { node: NodeId },
    TxComplete { tx: u64 },
    HoldCheck { node: NodeId, channel: ChannelId },
    LinkEvent { idx: usize },
}

#[derive(Debug, Clone, Copy)]
enum DropCause {
    Queue,
    NoRoute,
    HopBudget,
    LinkLoss,
}

struct FlowRuntime {
    def: FlowDef,
    sender: Option<ReliableSender>,
    receiver: ReliableReceiver,
    ledger: DeliveryLedger,
}

pub(crate) struct Engine {
    scenario: Scenario,
    protocol: Protocol,
    topo: Topology,
    hops: HopMatrix,
    sched: Scheduler<Action>,
    channels: BTreeMap<ChannelId, ChannelMedium>,
    nodes: BTreeMap<NodeId, NodeState>,
    flows: Vec<FlowRuntime>,
    flow_index: BTreeMap<FlowId, usize>,
    flow_counters: Vec<Counters>,
    control: Counters,
    series: TimeSeries,
    aal2r_cfg: Aal2rConfig,
    loss_stream: RandomStream,
    hop_budget_init: u32,
    next_packet_id: u64,
    next_tx_id: u64,
    in_air: BTreeMap<u64, InAir>,
    record_tx_log: bool,
    tx_log: Vec<TxRecord>,
    frames_transmitted: u64,
    hop_violations: u64,
}

impl Engine {
    pub(crate) fn new(scenario: Scenario, record_tx_log: bool) -> Result<Engine, EngineError> {
        let topo = scenario.build_topology()?;
        let hops = HopMatrix::compute(&topo);
        let protocol = scenario.protocol;

        let mut channels = BTreeMap::new();
        let mut nodes = BTreeMap::new();
        for id in topo.node_ids() {
            let spec = topo.node(id).expect("node exists");
            let mut radio_busy = BTreeMap::new();
            for radio in &spec.radios {
                radio_busy.insert(radio.channel, false);
                channels
                    .entry(radio.channel)
                    .or_insert_with(|| ChannelMedium::new(radio.channel));
            }
            let router = match protocol {
                Protocol::Gsr => RouterState::Gsr {
                    tables: GsrTables::new(id, topo.neighbors(id)),
                    queues: BTreeMap::new(),
                },
                Protocol::Aal2r => RouterState::Aal2r(Aal2rNodeState::default()),
            };
            nodes.insert(id, NodeState { router, radio_busy });
        }

        let mut flows = Vec::new();
        let mut flow_index = BTreeMap::new();
        for (i, def) in scenario.flows.iter().enumerate() {
            flow_index.insert(FlowId(def.id), i);
            let sender = match def.kind {
                FlowKind::Reliable => Some(ReliableSender::new(
                    def.window.expect("normalized") as usize,
                    def.rto_initial_s.expect("normalized"),
                )),
                FlowKind::Cbr => None,
            };
            flows.push(FlowRuntime {
                def: def.clone(),
                sender,
                receiver: ReliableReceiver::default(),
                ledger: DeliveryLedger::default(),
            });
        }

        let streams = StreamFactory::new(scenario.seed);
        let flow_count = flows.len();
        let hop_budget_init = 2 * topo.node_count() as u32;
        let series = TimeSeries::new(scenario.duration_s, scenario.series_bin_s);
        let aal2r_cfg = Aal2rConfig {
            mtu_bytes: scenario.mtu_bytes,
            header_bytes: scenario.header_bytes,
            queue_priority: scenario.aal2r.queue_priority,
            hold_time_s: scenario.aal2r.hold_time_s,
        };

        let mut engine = Engine {
            protocol,
            topo,
            hops,
            sched: Scheduler::new(),
            channels,
            nodes,
            flows,
            flow_index,
            flow_counters: vec![Counters::default(); flow_count],
            control: Counters::default(),
            series,
            aal2r_cfg,
            loss_stream: streams.stream("loss"),
            hop_budget_init,
            next_packet_id: 0,
            next_tx_id: 0,
            in_air: BTreeMap::new(),
            record_tx_log,
            tx_log: Vec::new(),
            frames_transmitted: 0,
            hop_violations: 0,
            scenario,
        };
        engine.schedule_initial(&streams);
        Ok(engine)
    }

    fn schedule_initial(&mut self, streams: &StreamFactory) {
        for (i, flow) in self.scenario.flows.iter().enumerate() {
            let action = match flow.kind {
                FlowKind::Cbr => Action::CbrInject { flow: i, k: 0 },
                FlowKind::Reliable => Action::ReliableStart { flow: i },
            };
            self.sched
                .schedule(SimTime::from_secs(flow.start_s), action)
                .expect("start times are non-negative");
        }
        if self.protocol == Protocol::Gsr {
            // desynchronize the periodic broadcasts with a seeded phase
            let mut jitter = streams.stream("gsr");
            let interval = self.scenario.gsr.update_interval_s;
            let ids: Vec<NodeId> = self.topo.node_ids().collect();
            for node in ids {
                let first = SimTime::from_secs(jitter.next_f64() * interval);
                self.sched
                    .schedule(first, Action::GsrBroadcast { node })
                    .expect("jitter within interval");
            }
        }
        for idx in 0..self.scenario.link_events.len() {
            let at = SimTime::from_secs(self.scenario.link_events[idx].at_s);
            self.sched
                .schedule(at, Action::LinkEvent { idx })
                .expect("validated event time");
        }
    }

    pub(crate) fn run(&mut self) -> Result<RunOutput, EngineError> {
        let t_end = SimTime::from_secs(self.scenario.duration_s);
        while let Some((_, action)) = self.sched.next_until(t_end) {
            self.dispatch(action);
        }
        self.finalize()
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::CbrInject { flow, k } => self.on_cbr_inject(flow, k),
            Action::ReliableStart { flow } => self.reliable_fill_window(flow),
            Action::RtoTimer { flow, gen } => self.on_rto_timer(flow, gen),
            Action::GsrBroadcast { node } => self.on_gsr_broadcast(node),
            Action::TxComplete { tx } => self.on_tx_complete(tx),
            Action::HoldCheck { node, channel } => self.try_serve(node, channel),
            Action::LinkEvent { idx } => self.on_link_event(idx),
        }
    }

    fn alloc_packet_id(&mut self) -> PacketId {
        let id = PacketId(self.next_packet_id);
        self.next_packet_id += 1;
        id
    }

    fn make_data_packet(&mut self, flow_idx: usize, seq: u64, id: PacketId) -> Packet {
        let def = &self.flows[flow_idx].def;
        let (src, dst) = (NodeId(def.src), NodeId(def.dst));
        let now = self.sched.now();
        Packet {
            id,
            flow: FlowId(def.id),
            src,
            dst,
            size_bytes: def.pkt_bytes,
            created_at: now,
            enqueue_ts: now,
            hop_budget: self.hop_budget_init,
            hops_taken: 0,
            injected_hop_distance: self.hops.get(src, dst),
            kind: PacketKind::Data { seq },
        }
    }

    // ---- traffic ----------------------------------------------------------

    fn on_cbr_inject(&mut self, flow_idx: usize, k: u64) {
        let def = self.flows[flow_idx].def.clone();
        let rate = def.rate_pps.expect("cbr flow has a rate");
        let id = self.alloc_packet_id();
        let packet = self.make_data_packet(flow_idx, k, id);
        self.flow_counters[flow_idx].sent += 1;
        self.series.record_sent(self.sched.now().secs());
        let src = packet.src;
        self.route_packet(src, packet);

        if let Some(t) = cbr_injection_at(def.start_s, def.stop_s, rate, k + 1) {
            self.sched
                .schedule(
                    t,
                    Action::CbrInject {
                        flow: flow_idx,
                        k: k + 1,
                    },
                )
                .expect("injection times increase");
        }
    }

    fn reliable_fill_window(&mut self, flow_idx: usize) {
        loop {
            let now = self.sched.now();
            let stop = self.flows[flow_idx].def.stop_s;
            if now.secs() >= stop {
                return;
            }
            {
                let sender = self.flows[flow_idx]
                    .sender
                    .as_ref()
                    .expect("reliable flow has a sender");
                if !sender.window_has_space() {
                    return;
                }
            }
            let id = self.alloc_packet_id();
            let (seq, arm_timer, rto) = {
                let sender = self.flows[flow_idx].sender.as_mut().expect("checked above");
                let was_idle = sender.in_flight() == 0;
                let seq = sender.on_send_new(id, now);
                if was_idle {
                    sender.timer_gen += 1;
                }
                (seq, was_idle, sender.rto_s)
            };
            self.flow_counters[flow_idx].sent += 1;
            self.series.record_sent(now.secs());
            if arm_timer {
                self.schedule_rto(flow_idx, rto);
            }
            let packet = self.make_data_packet(flow_idx, seq, id);
            let src = packet.src;
            self.route_packet(src, packet);
        }
    }

    fn schedule_rto(&mut self, flow_idx: usize, rto_s: f64) {
        let gen = self.flows[flow_idx].sender.as_ref().unwrap().timer_gen;
        let at = SimTime::from_secs(self.sched.now().secs() + rto_s);
        self.sched
            .schedule(
                at,
                Action::RtoTimer {
                    flow: flow_idx,
                    gen,
                },
            )
            .expect("timer in the future");
    }

    fn on_rto_timer(&mut self, flow_idx: usize, gen: u64) {
        let retransmit = {
            let sender = match self.flows[flow_idx].sender.as_mut() {
                Some(s) => s,
                None => return,
            };
            if sender.timer_gen != gen || sender.in_flight() == 0 {
                return;
            }
            let hit = sender.on_timeout();
            sender.timer_gen += 1;
            hit.map(|(seq, id)| (seq, id, sender.rto_s))
        };
        let Some((seq, id, rto)) = retransmit else {
            return;
        };
        self.flow_counters[flow_idx].retransmissions += 1;
        self.schedule_rto(flow_idx, rto);
        let packet = self.make_data_packet(flow_idx, seq, id);
        let src = packet.src;
        self.route_packet(src, packet);
    }

    // ---- GSR control plane ------------------------------------------------

    fn on_gsr_broadcast(&mut self, node: NodeId) {
        let now = self.sched.now();
        let (msg, neighbors) = match &mut self.nodes.get_mut(&node).unwrap().router {
            RouterState::Gsr { tables, .. } => {
                (tables.periodic_update(now), tables.neighbor_list.clone())
            }
            RouterState::Aal2r(_) => unreachable!("broadcast only scheduled for gsr"),
        };
        for neighbor in neighbors {
            let Some(link_id) = self.topo.lowest_link_between(node, neighbor) else {
                continue;
            };
            let channel = self.topo.link(link_id).channel;
            let key = QueueKey {
                next_hop: neighbor,
                channel,
            };
            let capacity = self.scenario.queue_capacity_pkts as usize;
            let pushed = match &mut self.nodes.get_mut(&node).unwrap().router {
                RouterState::Gsr { queues, .. } => queues
                    .entry(key)
                    .or_insert_with(|| InterfaceQueue::new(neighbor, link_id, capacity))
                    .push(GsrItem::Control(msg.clone()), now)
                    .is_ok(),
                RouterState::Aal2r(_) => unreachable!(),
            };
            if pushed {
                self.control.control_msgs_sent += 1;
                self.control.control_bytes_sent += msg.wire_size_bytes();
                self.try_serve(node, channel);
            } else {
                self.control.control_dropped += 1;
            }
        }
        let next = SimTime::from_secs(now.secs() + self.scenario.gsr.update_interval_s);
        self.sched
            .schedule(next, Action::GsrBroadcast { node })
            .expect("future broadcast");
    }

    // ---- forwarding -------------------------------------------------------

    /// A packet is at `at` and needs delivering or queueing toward its
    /// destination.
    fn route_packet(&mut self, at: NodeId, packet: Packet) {
        if packet.dst == at {
            self.deliver_local(at, packet);
            return;
        }
        let now = self.sched.now();
        let capacity = self.scenario.queue_capacity_pkts as usize;
        let outcome = {
            let topo = &self.topo;
            let hops = &self.hops;
            let cfg = &self.aal2r_cfg;
            let node = self.nodes.get_mut(&at).expect("packet at a known node");
            match &mut node.router {
                RouterState::Gsr { tables, queues } => {
                    let mut packet = packet;
                    match tables.forward(&mut packet) {
                        ForwardDecision::Deliver => unreachable!("handled above"),
                        ForwardDecision::NoRoute => {
                            RouteOutcome::Dropped(packet, DropCause::NoRoute)
                        }
                        ForwardDecision::HopBudgetExhausted => {
                            RouteOutcome::Dropped(packet, DropCause::HopBudget)
                        }
                        ForwardDecision::Forward(next_hop) => {
                            match topo.lowest_link_between(at, next_hop) {
                                None => RouteOutcome::Dropped(packet, DropCause::NoRoute),
                                Some(link_id) => {
                                    let channel = topo.link(link_id).channel;
                                    let key = QueueKey { next_hop, channel };
                                    let mut packet = packet;
                                    packet.enqueue_ts = now;
                                    let queue = queues.entry(key).or_insert_with(|| {
                                        InterfaceQueue::new(next_hop, link_id, capacity)
                                    });
                                    match queue.push(GsrItem::Data(packet), now) {
                                        Ok(()) => RouteOutcome::Queued(channel),
                                        Err(GsrItem::Data(packet)) => {
                                            RouteOutcome::Dropped(packet, DropCause::Queue)
                                        }
                                        Err(GsrItem::Control(_)) => unreachable!(),
                                    }
                                }
                            }
                        }
                    }
                }
                RouterState::Aal2r(state) => {
                    match candidate_next_hops(topo, hops, at, packet.dst) {
                        Err(_) => RouteOutcome::Dropped(packet, DropCause::NoRoute),
                        Ok(candidates) => {
                            match state.enqueue_packet(packet, &candidates, cfg, capacity, now) {
                                EnqueueOutcome::Enqueued(key) => RouteOutcome::Queued(key.channel),
                                EnqueueOutcome::QueueFull(packet) => {
                                    RouteOutcome::Dropped(packet, DropCause::Queue)
                                }
                            }
                        }
                    }
                }
            }
        };
        match outcome {
            RouteOutcome::Queued(channel) => self.try_serve(at, channel),
            RouteOutcome::Dropped(packet, cause) => self.drop_packet(packet, cause),
        }
    }

    fn drop_packet(&mut self, packet: Packet, cause: DropCause) {
        let Some(&idx) = self.flow_index.get(&packet.flow) else {
            return;
        };
        let counters = &mut self.flow_counters[idx];
        if packet.is_data() {
            match cause {
                DropCause::Queue => counters.dropped_queue += 1,
                DropCause::NoRoute => counters.dropped_noroute += 1,
                DropCause::HopBudget => counters.dropped_hopbudget += 1,
                DropCause::LinkLoss => counters.dropped_linkloss += 1,
            }
        } else {
            counters.acks_dropped += 1;
        }
    }

    fn deliver_local(&mut self, node: NodeId, packet: Packet) {
        let Some(&idx) = self.flow_index.get(&packet.flow) else {
            return;
        };
        if packet.dst != node {
            self.flow_counters[idx].routing_errors += 1;
            return;
        }
        let now = self.sched.now();
        if self.protocol == Protocol::Aal2r {
            if let Some(bound) = packet.injected_hop_distance {
                if packet.hops_taken > bound {
                    self.hop_violations += 1;
                }
            }
        }
        match packet.kind {
            PacketKind::Data { seq } => {
                let first = self.flows[idx].ledger.first_delivery(packet.id);
                let counters = &mut self.flow_counters[idx];
                if first {
                    counters.received += 1;
                    counters.bytes_delivered += packet.size_bytes as u64;
                    self.series
                        .record_delivery(now.secs(), packet.size_bytes as u64);
                } else {
                    counters.duplicates += 1;
                }
                if self.flows[idx].def.kind == FlowKind::Reliable {
                    let next_expected = self.flows[idx].receiver.on_data(seq);
                    let ack = self.make_ack_packet(idx, node, next_expected);
                    self.flow_counters[idx].acks_sent += 1;
                    self.route_packet(node, ack);
                }
            }
            PacketKind::Ack { next_expected } => {
                self.flow_counters[idx].acks_delivered += 1;
                let advanced = {
                    let Some(sender) = self.flows[idx].sender.as_mut() else {
                        self.flow_counters[idx].routing_errors += 1;
                        return;
                    };
                    let advanced = sender.on_ack(next_expected, now);
                    if advanced {
                        sender.timer_gen += 1;
                    }
                    advanced
                };
                if advanced {
                    let (in_flight, rto) = {
                        let sender = self.flows[idx].sender.as_ref().unwrap();
                        (sender.in_flight(), sender.rto_s)
                    };
                    if in_flight > 0 {
                        self.schedule_rto(idx, rto);
                    }
                    self.reliable_fill_window(idx);
                }
            }
        }
    }

    fn make_ack_packet(&mut self, flow_idx: usize, from: NodeId, next_expected: u64) -> Packet {
        let id = self.alloc_packet_id();
        let def = &self.flows[flow_idx].def;
        let dst = NodeId(def.src);
        let now = self.sched.now();
        Packet {
            id,
            flow: FlowId(def.id),
            src: from,
            dst,
            size_bytes: ACK_BYTES,
            created_at: now,
            enqueue_ts: now,
            hop_budget: self.hop_budget_init,
            hops_taken: 0,
            injected_hop_distance: self.hops.get(from, dst),
            kind: PacketKind::Ack { next_expected },
        }
    }

    // ---- radio service and the medium --------------------------------------

    fn try_serve(&mut self, node: NodeId, channel: ChannelId) {
        let now = self.sched.now();
        {
            let state = self.nodes.get(&node).expect("known node");
            match state.radio_busy.get(&channel) {
                Some(false) => {}
                _ => return,
            }
        }
        let served: Option<(LinkId, Frame)> = {
            let cfg = &self.aal2r_cfg;
            let node_state = self.nodes.get_mut(&node).unwrap();
            match &mut node_state.router {
                RouterState::Gsr { queues, .. } => {
                    let best = queues
                        .iter()
                        .filter(|(key, q)| key.channel == channel && !q.is_empty())
                        .min_by_key(|(key, q)| (q.head_enqueued_at().unwrap(), **key))
                        .map(|(key, _)| *key);
                    best.map(|key| {
                        let queue = queues.get_mut(&key).unwrap();
                        let link = queue.link;
                        let (item, _) = queue.pop().expect("non-empty");
                        let frame = match item {
                            GsrItem::Control(msg) => Frame::Control(msg),
                            GsrItem::Data(packet) => Frame::Data(TransmissionUnit {
                                header_bytes: cfg.header_bytes,
                                packets: vec![packet],
                            }),
                        };
                        (link, frame)
                    })
                }
                RouterState::Aal2r(state) => {
                    match state.select_queue_for_radio(channel, cfg, now) {
                        Some(key) => {
                            let queue = state.queues.get_mut(&key).unwrap();
                            let link = queue.link;
                            let unit = assemble_unit(queue, cfg).expect("selected queue non-empty");
                            Some((link, Frame::Data(unit)))
                        }
                        None => {
                            if let Some(deadline) = state.next_hold_deadline(channel, cfg) {
                                let at = deadline.max(now);
                                self.sched
                                    .schedule(at, Action::HoldCheck { node, channel })
                                    .expect("deadline clamped to now");
                            }
                            None
                        }
                    }
                }
            }
        };
        if let Some((link, frame)) = served {
            self.transmit(node, link, frame);
        }
    }

    fn transmit(&mut self, from: NodeId, link_id: LinkId, frame: Frame) {
        let now = self.sched.now();
        let link = self.topo.link(link_id);
        let (channel, rate_bps) = (link.channel, link.rate_bps);
        let to = link.other(from);
        let bytes = frame.bytes();
        let duration = serialization_delay(bytes, rate_bps);
        let medium = self.channels.get_mut(&channel).expect("medium exists");
        let (start, end) = medium.reserve(now, duration);
        self.nodes
            .get_mut(&from)
            .unwrap()
            .radio_busy
            .insert(channel, true);
        if self.record_tx_log {
            let (payload_bytes, packets, kind) = match &frame {
                Frame::Data(unit) => (
                    unit.payload_bytes(),
                    unit.packets
                        .iter()
                        .map(|p| TxPacket {
                            flow: p.flow,
                            size_bytes: p.size_bytes,
                            dst: p.dst,
                            is_data: p.is_data(),
                            data_seq: match p.kind {
                                PacketKind::Data { seq } => Some(seq),
                                PacketKind::Ack { .. } => None,
                            },
                        })
                        .collect(),
                    FrameKind::Data,
                ),
                Frame::Control(_) => (0, Vec::new(), FrameKind::Control),
            };
            self.tx_log.push(TxRecord {
                channel,
                link: link_id,
                from,
                to,
                requested_at: now,
                start,
                end,
                frame_bytes: bytes,
                payload_bytes,
                packets,
                rate_bps,
                kind,
            });
        }
        self.frames_transmitted += 1;
        let tx = self.next_tx_id;
        self.next_tx_id += 1;
        self.in_air.insert(
            tx,
            InAir {
                frame,
                link: link_id,
                from,
                to,
            },
        );
        self.sched
            .schedule(end, Action::TxComplete { tx })
            .expect("completion in the future");
    }

    fn on_tx_complete(&mut self, tx: u64) {
        let InAir {
            frame,
            link,
            from,
            to,
        } = self.in_air.remove(&tx).expect("in-flight frame");
        let (channel, loss_prob) = {
            let l = self.topo.link(link);
            (l.channel, l.loss_prob)
        };
        self.nodes
            .get_mut(&from)
            .unwrap()
            .radio_busy
            .insert(channel, false);
        let lost = loss_prob > 0.0 && self.loss_stream.next_f64() < loss_prob;
        if lost {
            match frame {
                Frame::Data(unit) => {
                    for packet in deaggregate(unit) {
                        self.drop_packet(packet, DropCause::LinkLoss);
                    }
                }
                Frame::Control(_) => self.control.control_dropped += 1,
            }
        } else {
            match frame {
                Frame::Control(msg) => {
                    let now = self.sched.now();
                    if let RouterState::Gsr { tables, .. } =
                        &mut self.nodes.get_mut(&to).unwrap().router
                    {
                        tables.handle_update(&msg, now);
                    }
                }
                Frame::Data(unit) => {
                    for mut packet in deaggregate(unit) {
                        packet.hops_taken += 1;
                        if packet.dst == to {
                            self.deliver_local(to, packet);
                        } else {
                            self.route_packet(to, packet);
                        }
                    }
                }
            }
        }
        self.try_serve(from, channel);
    }

    // ---- scripted link events ----------------------------------------------

    fn on_link_event(&mut self, idx: usize) {
        let ev = self.scenario.link_events[idx].clone();
        let (a, b) = (NodeId(ev.a), NodeId(ev.b));
        let up = ev.action == LinkAction::Up;
        let matching: Vec<LinkId> = (0..self.topo.link_count() as u32)
            .map(LinkId)
            .filter(|&l| {
                let link = self.topo.link(l);
                link.joins(a, b)
                    && ev
                        .channel
                        .map(|c| link.channel == ChannelId(c))
                        .unwrap_or(true)
            })
            .collect();
        for l in matching {
            if up {
                self.topo.set_up(l, true);
            } else if self.topo.is_up(l) {
                self.topo.set_up(l, false);
                self.flush_link_queues(l);
            }
        }
        self.hops = HopMatrix::compute(&self.topo);
        let now = self.sched.now();
        for node in [a, b] {
            let neighbors = self.topo.neighbors(node);
            if let RouterState::Gsr { tables, .. } = &mut self.nodes.get_mut(&node).unwrap().router
            {
                tables.set_local_adjacency(neighbors, now);
            }
        }
        if self.protocol == Protocol::Aal2r {
            for state in self.nodes.values_mut() {
                if let RouterState::Aal2r(st) = &mut state.router {
                    st.reset_schedulers();
                }
            }
        }
    }

    fn flush_link_queues(&mut self, link_id: LinkId) {
        let link = self.topo.link(link_id).clone();
        let mut orphans: Vec<Packet> = Vec::new();
        let mut control_lost = 0u64;
        for endpoint in [link.a, link.b] {
            let key = QueueKey {
                next_hop: link.other(endpoint),
                channel: link.channel,
            };
            match &mut self.nodes.get_mut(&endpoint).unwrap().router {
                RouterState::Gsr { queues, .. } => {
                    if let Some(mut q) = queues.remove(&key) {
                        for (item, _) in q.drain() {
                            match item {
                                GsrItem::Data(p) => orphans.push(p),
                                GsrItem::Control(_) => control_lost += 1,
                            }
                        }
                    }
                }
                RouterState::Aal2r(state) => {
                    if let Some(mut q) = state.queues.remove(&key) {
                        orphans.extend(q.drain());
                    }
                }
            }
        }
        self.control.control_dropped += control_lost;
        for packet in orphans {
            self.drop_packet(packet, DropCause::LinkLoss);
        }
    }

    // ---- end of run ---------------------------------------------------------

    fn finalize(&mut self) -> Result<RunOutput, EngineError> {
        let mut in_flight = vec![0u64; self.flows.len()];
        let count = |packet: &Packet, in_flight: &mut Vec<u64>, index: &BTreeMap<FlowId, usize>| {
            if packet.is_data() {
                if let Some(&idx) = index.get(&packet.flow) {
                    in_flight[idx] += 1;
                }
            }
        };
        for state in self.nodes.values() {
            match &state.router {
                RouterState::Gsr { queues, .. } => {
                    for q in queues.values() {
                        for (item, _) in q.iter() {
                            if let GsrItem::Data(p) = item {
                                count(p, &mut in_flight, &self.flow_index);
                            }
                        }
                    }
                }
                RouterState::Aal2r(st) => {
                    for q in st.queues.values() {
                        for p in q.iter() {
                            count(p, &mut in_flight, &self.flow_index);
                        }
                    }
                }
            }
        }
        for air in self.in_air.values() {
            if let Frame::Data(unit) = &air.frame {
                for p in &unit.packets {
                    count(p, &mut in_flight, &self.flow_index);
                }
            }
        }

        let duration = self.scenario.duration_s;
        let mut totals = Counters::default();
        let mut flow_summaries = Vec::new();
        for (idx, counters) in self.flow_counters.iter().enumerate() {
            check_conservation(counters, in_flight[idx]).map_err(|msg| {
                EngineError::Invariant(format!("flow {}: {msg}", self.flows[idx].def.id))
            })?;
            totals.add(counters);
            flow_summaries.push(crate::report::FlowSummary {
                flow_id: self.flows[idx].def.id,
                metrics: MetricsSummary::compute(counters.clone(), duration, in_flight[idx]),
                reliable_max_in_flight: self.flows[idx]
                    .sender
                    .as_ref()
                    .map(|s| s.max_in_flight_seen as u64),
            });
        }
        let total_in_flight: u64 = in_flight.iter().sum();
        check_conservation(&totals, total_in_flight).map_err(EngineError::Invariant)?;
        totals.add(&self.control);

        if self.series.total_delivered_pkts() != totals.received {
            return Err(EngineError::Invariant(format!(
                "time series delivered {} != received {}",
                self.series.total_delivered_pkts(),
                totals.received
            )));
        }
        if self.series.total_delivered_bytes() != totals.bytes_delivered {
            return Err(EngineError::Invariant(
                "time series bytes disagree with totals".into(),
            ));
        }

        let report = Report::assemble(
            &self.scenario,
            self.protocol,
            MetricsSummary::compute(totals, duration, total_in_flight),
            flow_summaries,
            &self.series,
            self.sched.events_processed(),
            self.frames_transmitted,
            self.hop_violations,
        );
        Ok(RunOutput {
            report,
            tx_log: std::mem::take(&mut self.tx_log),
        })
    }
}

enum RouteOutcome {
    Queued(ChannelId),
    Dropped(Packet, DropCause),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{preset, FlowKind, LinkEventDef};

    fn line3(protocol: Protocol) -> Scenario {
        let mut sc = preset("line-3").unwrap();
        sc.protocol = protocol;
        sc
    }

    fn run_logged(sc: &Scenario) -> RunOutput {
        run_scenario_with(
            sc,
            &RunOptions {
                record_tx_log: true,
                ..RunOptions::default()
            },
        )
        .expect("run succeeds")
    }

    #[test]
    fn lossfree_line_delivers_everything() {
        for protocol in [Protocol::Aal2r, Protocol::Gsr] {
            let report = run_scenario(&line3(protocol)).unwrap();
            assert_eq!(report.totals.pdr, Some(1.0), "{protocol}");
            assert_eq!(report.totals.counters.sent, 2400);
            assert_eq!(report.totals.in_flight_at_end, 0);
            assert_eq!(report.totals.counters.routing_errors, 0);
            assert_eq!(report.aal2r_hop_violations, 0);
        }
    }

    #[test]
    fn gsr_control_traffic_is_accounted() {
        let report = run_scenario(&line3(Protocol::Gsr)).unwrap();
        assert!(report.totals.counters.control_msgs_sent > 0);
        assert!(report.totals.counters.control_bytes_sent > 0);
        // line of three: ends send 1 copy, middle sends 2, every second
        let per_round = 4;
        let expected_min = (report.duration_s as u64 - 1) * per_round;
        assert!(report.totals.counters.control_msgs_sent >= expected_min);
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let sc = line3(Protocol::Gsr);
        let a = run_scenario(&sc).unwrap();
        let b = run_scenario(&sc).unwrap();
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.series_csv(), b.series_csv());
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn frame_timing_is_exact_and_channels_never_overlap() {
        let out = run_logged(&line3(Protocol::Aal2r));
        assert!(!out.tx_log.is_empty());
        let mut by_channel: BTreeMap<ChannelId, Vec<(SimTime, SimTime)>> = BTreeMap::new();
        for rec in &out.tx_log {
            let expect = rec.start + serialization_delay(rec.frame_bytes, rec.rate_bps);
            assert_eq!(rec.end, expect, "delivery = grant + size*8/rate exactly");
            assert!(rec.start >= rec.requested_at);
            by_channel
                .entry(rec.channel)
                .or_default()
                .push((rec.start, rec.end));
        }
        for intervals in by_channel.values() {
            let mut sorted = intervals.clone();
            sorted.sort();
            for pair in sorted.windows(2) {
                assert!(pair[0].1 <= pair[1].0, "overlapping transmissions");
            }
        }
    }

    #[test]
    fn certain_link_loss_drops_every_frame() {
        let mut sc = line3(Protocol::Aal2r);
        sc.link_loss_prob = 1.0;
        let report = run_scenario(&sc).unwrap();
        assert_eq!(report.totals.counters.received, 0);
        assert_eq!(
            report.totals.counters.dropped_linkloss,
            report.totals.counters.sent
        );
    }

    #[test]
    fn partial_link_loss_balances_the_books() {
        for protocol in [Protocol::Aal2r, Protocol::Gsr] {
            let mut sc = line3(protocol);
            sc.link_loss_prob = 0.2;
            // conservation is checked inside run(); failure would error
            let report = run_scenario(&sc).unwrap();
            assert!(report.totals.counters.dropped_linkloss > 0, "{protocol}");
            assert!(report.totals.pdr.unwrap() < 1.0);
        }
    }

    #[test]
    fn scripted_link_down_blackholes_the_line() {
        for protocol in [Protocol::Aal2r, Protocol::Gsr] {
            let mut sc = line3(protocol);
            sc.link_events = vec![LinkEventDef {
                at_s: 10.0,
                action: LinkAction::Down,
                a: 1,
                b: 2,
                channel: None,
            }];
            let report = run_scenario(&sc).unwrap();
            let c = &report.totals.counters;
            assert!(c.received < c.sent, "{protocol}");
            // traffic after the cut is unroutable or flushed
            assert!(c.dropped_noroute + c.dropped_linkloss > 0, "{protocol}");
        }
    }

    #[test]
    fn scripted_link_up_restores_delivery() {
        let mut sc = line3(Protocol::Gsr);
        sc.link_events = vec![
            LinkEventDef {
                at_s: 5.0,
                action: LinkAction::Down,
                a: 1,
                b: 2,
                channel: None,
            },
            LinkEventDef {
                at_s: 10.0,
                action: LinkAction::Up,
                a: 1,
                b: 2,
                channel: None,
            },
        ];
        let report = run_scenario(&sc).unwrap();
        // deliveries resume after the link returns: more than the first 4s worth
        assert!(report.totals.counters.received > 500);
        assert!(report.totals.pdr.unwrap() < 1.0);
    }

    fn reliable_line3(protocol: Protocol) -> Scenario {
        let mut sc = line3(protocol);
        sc.flows[0].kind = FlowKind::Reliable;
        sc.flows[0].rate_pps = None;
        sc.flows[0].window = Some(8);
        sc.flows[0].rto_initial_s = Some(1.0);
        sc.flows[0].stop_s = 20.0;
        let mut sc = Scenario::from_toml(&sc.to_toml()).unwrap(); // renormalize
        sc.protocol = protocol;
        sc
    }

    #[test]
    fn reliable_flow_delivers_every_sequence_lossfree() {
        for protocol in [Protocol::Aal2r, Protocol::Gsr] {
            let sc = reliable_line3(protocol);
            let report = run_scenario(&sc).unwrap();
            let c = &report.totals.counters;
            assert!(c.sent > 100, "{protocol}: sent {}", c.sent);
            assert_eq!(c.received, c.sent, "{protocol}");
            assert_eq!(c.duplicates, 0, "{protocol}");
            assert_eq!(c.retransmissions, 0, "{protocol}");
            assert!(c.acks_sent > 0 && c.acks_delivered > 0);
        }
    }

    #[test]
    fn reliable_flow_recovers_from_loss() {
        let mut sc = reliable_line3(Protocol::Aal2r);
        sc.link_loss_prob = 0.1;
        let report = run_scenario(&sc).unwrap();
        let c = &report.totals.counters;
        assert!(c.retransmissions > 0);
        assert!(c.received > 0);
        // per-copy conservation held inside run(); spot-check the identity
        assert_eq!(
            c.sent + c.retransmissions,
            c.received + c.duplicates + c.dropped_total() + report.totals.in_flight_at_end
        );
    }

    fn two_node_link(rate_pps: f64, stop_s: f64, duration_s: f64) -> Scenario {
        let mut sc = preset("line-3").unwrap();
        sc.nodes.truncate(2);
        sc.duration_s = duration_s;
        sc.flows[0].dst = 1;
        sc.flows[0].rate_pps = Some(rate_pps);
        sc.flows[0].start_s = 0.0;
        sc.flows[0].stop_s = stop_s;
        sc
    }

    #[test]
    fn saturated_link_throughput_tracks_the_capacity_oracle() {
        // 1000-byte packets cannot pair up under the 1500 MTU, so every
        // frame is 1028 bytes and the single-packet capacity oracle applies
        let frame = 1028.0;
        let cap_pps = 6_000_000.0 / (frame * 8.0);
        let mut sc = two_node_link(2.0 * cap_pps, 30.0, 30.0);
        sc.flows[0].pkt_bytes = 1000;
        let report = run_scenario(&sc).unwrap();
        let oracle = 6_000_000.0 * (1000.0 / frame);
        let measured = report.totals.throughput_avg_bps;
        assert!(
            (measured - oracle).abs() / oracle < 0.01,
            "measured {measured} vs oracle {oracle}"
        );
        assert!(report.totals.counters.dropped_queue > 0);

        // with 512-byte packets the backlog packs two per frame; the oracle
        // is the same closed form with the aggregated frame composition
        let sc = two_node_link(2.0 * 6_000_000.0 / (540.0 * 8.0), 30.0, 30.0);
        let report = run_scenario(&sc).unwrap();
        let oracle = 6_000_000.0 * (1024.0 / 1052.0);
        let measured = report.totals.throughput_avg_bps;
        assert!(
            (measured - oracle).abs() / oracle < 0.01,
            "aggregated: measured {measured} vs oracle {oracle}"
        );
    }

    #[test]
    fn under_capacity_link_delivers_all() {
        let sc = two_node_link(500.0, 25.0, 30.0);
        let report = run_scenario(&sc).unwrap();
        assert_eq!(report.totals.pdr, Some(1.0));
        assert_eq!(report.totals.counters.dropped_queue, 0);
    }

    #[test]
    fn gsr_uses_one_queue_per_destination_aal2r_splits() {
        // flows start after convergence so the trace reflects steady routing
        let mut sc = preset("paper-10node").unwrap();
        for f in &mut sc.flows {
            f.start_s = 8.0;
        }
        sc.protocol = Protocol::Gsr;
        let out = run_logged(&sc);
        let mut links_used: BTreeMap<(NodeId, NodeId), std::collections::BTreeSet<LinkId>> =
            BTreeMap::new();
        for rec in out.tx_log.iter().filter(|r| r.kind == FrameKind::Data) {
            for p in &rec.packets {
                links_used
                    .entry((rec.from, p.dst))
                    .or_default()
                    .insert(rec.link);
            }
        }
        for ((from, dst), links) in &links_used {
            assert_eq!(links.len(), 1, "gsr {from}->{dst} used {links:?}");
        }

        sc.protocol = Protocol::Aal2r;
        let out = run_logged(&sc);
        let mut links_used: BTreeMap<(NodeId, NodeId), std::collections::BTreeSet<LinkId>> =
            BTreeMap::new();
        for rec in out.tx_log.iter().filter(|r| r.kind == FrameKind::Data) {
            for p in &rec.packets {
                links_used
                    .entry((rec.from, p.dst))
                    .or_default()
                    .insert(rec.link);
            }
        }
        assert!(
            links_used.values().any(|links| links.len() > 1),
            "aal2r should split some (node, destination) over several links"
        );
    }

    #[test]
    fn aal2r_aggregates_under_congestion() {
        // single-channel grid slightly over capacity: queues back up and
        // units carry several packets
        let sc = preset("grid-9").unwrap();
        let out = run_logged(&sc);
        let multi = out
            .tx_log
            .iter()
            .filter(|r| r.kind == FrameKind::Data && r.packets.len() > 1)
            .count();
        assert!(multi > 0, "congestion should produce multi-packet units");
        for rec in &out.tx_log {
            assert!(rec.frame_bytes <= 1500);
        }
    }

    #[test]
    fn misdelivered_packet_hits_the_routing_error_counter() {
        let sc = line3(Protocol::Aal2r);
        let mut engine = Engine::new(sc, false).unwrap();
        let id = engine.alloc_packet_id();
        let mut packet = engine.make_data_packet(0, 0, id);
        packet.dst = NodeId(2);
        engine.deliver_local(NodeId(1), packet); // wrong node
        assert_eq!(engine.flow_counters[0].routing_errors, 1);
    }

    #[test]
    fn hold_time_delays_but_still_delivers() {
        let mut sc = line3(Protocol::Aal2r);
        sc.aal2r.hold_time_s = 0.005;
        let report = run_scenario(&sc).unwrap();
        assert_eq!(report.totals.pdr, Some(1.0));
        assert_eq!(report.totals.in_flight_at_end, 0);
    }

    #[test]
    fn avg_age_policy_runs_the_congested_grid() {
        let mut sc = preset("grid-9").unwrap();
        sc.aal2r.queue_priority = crate::aal2r::QueuePriority::AvgAge;
        let report = run_scenario(&sc).unwrap();
        assert!(report.totals.counters.received > 0);
        assert_eq!(report.aal2r_hop_violations, 0);
    }

    #[test]
    fn update_interval_scales_control_volume() {
        let slow = run_scenario(&line3(Protocol::Gsr)).unwrap();
        let mut fast_sc = line3(Protocol::Gsr);
        fast_sc.gsr.update_interval_s = 0.5;
        let fast = run_scenario(&fast_sc).unwrap();
        let ratio = fast.totals.counters.control_msgs_sent as f64
            / slow.totals.counters.control_msgs_sent as f64;
        assert!((1.8..2.2).contains(&ratio), "halved interval ratio {ratio}");
    }

    #[test]
    fn per_queue_fifo_never_reorders_a_flow_on_a_single_path() {
        // the line gives every hop exactly one candidate queue, so the
        // flow's sequences must leave each node in injection order
        let out = run_logged(&line3(Protocol::Aal2r));
        let mut last_seq: BTreeMap<(NodeId, u32), u64> = BTreeMap::new();
        for rec in out.tx_log.iter().filter(|r| r.kind == FrameKind::Data) {
            for p in rec.packets.iter().filter(|p| p.is_data) {
                let key = (rec.from, p.flow.0);
                let seq = p.data_seq.unwrap();
                if let Some(&prev) = last_seq.get(&key) {
                    assert!(seq > prev, "flow {} reordered at {}", p.flow.0, rec.from);
                }
                last_seq.insert(key, seq);
            }
        }
        assert!(!last_seq.is_empty());
    }

    #[test]
    fn oldest_head_service_starves_neither_backlogged_queue() {
        // one sender, two saturated next-hop queues on the same radio
        let mut sc = line3(Protocol::Aal2r);
        sc.duration_s = 10.0;
        sc.nodes[1].position = [100.0, 0.0];
        sc.nodes[2].position = [0.0, 100.0]; // both adjacent to node 0 only
        sc.flows = vec![
            crate::scenario::FlowDef {
                id: 0,
                kind: FlowKind::Cbr,
                src: 0,
                dst: 1,
                pkt_bytes: 512,
                start_s: 0.0,
                stop_s: 10.0,
                rate_pps: Some(800.0),
                window: None,
                rto_initial_s: None,
            },
            crate::scenario::FlowDef {
                id: 1,
                kind: FlowKind::Cbr,
                src: 0,
                dst: 2,
                pkt_bytes: 512,
                start_s: 0.0,
                stop_s: 10.0,
                rate_pps: Some(800.0),
                window: None,
                rto_initial_s: None,
            },
        ];
        let report = run_scenario(&sc).unwrap();
        let r0 = report.flows[0].metrics.counters.received;
        let r1 = report.flows[1].metrics.counters.received;
        let total = r0 + r1;
        assert!(total > 5_000, "link should run at capacity, got {total}");
        for (flow, r) in [(0, r0), (1, r1)] {
            assert!(
                r as f64 >= 0.4 * total as f64,
                "flow {flow} starved: {r} of {total}"
            );
        }
    }
}
