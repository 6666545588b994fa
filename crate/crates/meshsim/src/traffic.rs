//! Flow generation: constant-bit-rate datagram flows and a simplified
//! windowed reliable flow with cumulative acks.

use std::collections::{BTreeMap, BTreeSet};

use crate::packet::PacketId;
use crate::sim::SimTime;

pub const ACK_BYTES: u32 = 40;
const RTO_CAP_S: f64 = 4.0;
const RTT_EWMA_ALPHA: f64 = 0.125;

/// Injection instants of a CBR flow: start, start + 1/rate, ... strictly
/// before stop.
pub fn cbr_injection_times(
    start_s: f64,
    stop_s: f64,
    rate_pps: f64,
) -> impl Iterator<Item = SimTime> {
    (0u64..)
        .map(move |k| start_s + k as f64 / rate_pps)
        .take_while(move |&t| t < stop_s)
        .map(SimTime::from_secs)
}

/// The k-th injection instant, or None once past the stop time.
pub fn cbr_injection_at(start_s: f64, stop_s: f64, rate_pps: f64, k: u64) -> Option<SimTime> {
    let t = start_s + k as f64 / rate_pps;
    (t < stop_s).then(|| SimTime::from_secs(t))
}

#[derive(Debug, Clone)]
struct FlightEntry {
    sent_at: SimTime,
    retransmitted: bool,
    packet_id: PacketId,
}

/// Sender side of the reliable flow: fixed window, cumulative acks, single
/// retransmission timer over the oldest unacked sequence.
#[derive(Debug)]
pub struct ReliableSender {
    pub window: usize,
    pub next_seq: u64,
    /// All sequences below this are acknowledged.
    pub acked_below: u64,
    in_flight: BTreeMap<u64, FlightEntry>,
    srtt_s: Option<f64>,
    pub rto_s: f64,
    /// Invalidates stale timer events after each restart.
    pub timer_gen: u64,
    pub max_in_flight_seen: usize,
}

impl ReliableSender {
    pub fn new(window: usize, rto_initial_s: f64) -> ReliableSender {
        ReliableSender {
            window,
            next_seq: 0,
            acked_below: 0,
            in_flight: BTreeMap::new(),
            srtt_s: None,
            rto_s: rto_initial_s,
            timer_gen: 0,
            max_in_flight_seen: 0,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn window_has_space(&self) -> bool {
        self.in_flight.len() < self.window
    }

    /// Registers a fresh send and returns the sequence used.
    pub fn on_send_new(&mut self, packet_id: PacketId, now: SimTime) -> u64 {
        debug_assert!(self.window_has_space());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_flight.insert(
            seq,
            FlightEntry {
                sent_at: now,
                retransmitted: false,
                packet_id,
            },
        );
        self.max_in_flight_seen = self.max_in_flight_seen.max(self.in_flight.len());
        seq
    }

    /// Cumulative ack: removes every sequence below `next_expected`, feeds
    /// fresh RTT samples (retransmitted sequences are skipped), and returns
    /// whether the window slid forward.
    pub fn on_ack(&mut self, next_expected: u64, now: SimTime) -> bool {
        if next_expected <= self.acked_below {
            return false;
        }
        let newly: Vec<u64> = self
            .in_flight
            .range(..next_expected)
            .map(|(&s, _)| s)
            .collect();
        for seq in newly {
            let entry = self.in_flight.remove(&seq).expect("ranged key");
            if !entry.retransmitted {
                let sample = now.secs() - entry.sent_at.secs();
                let srtt = match self.srtt_s {
                    Some(prev) => (1.0 - RTT_EWMA_ALPHA) * prev + RTT_EWMA_ALPHA * sample,
                    None => sample,
                };
                self.srtt_s = Some(srtt);
                self.rto_s = (2.0 * srtt).min(RTO_CAP_S);
            }
        }
        self.acked_below = next_expected;
        true
    }

    /// Timeout handling: pick the oldest unacked sequence for retransmission
    /// and back the timer off. Returns (seq, packet id) or None when nothing
    /// is outstanding.
    pub fn on_timeout(&mut self) -> Option<(u64, PacketId)> {
        let (&seq, _) = self.in_flight.iter().next()?;
        let entry = self.in_flight.get_mut(&seq).expect("key exists");
        entry.retransmitted = true;
        let id = entry.packet_id;
        self.rto_s = (self.rto_s * 2.0).min(RTO_CAP_S);
        Some((seq, id))
    }
}

/// Receiver side: tracks the contiguous frontier for cumulative acks.
#[derive(Debug, Default)]
pub struct ReliableReceiver {
    /// Every sequence below this has been received.
    pub next_expected: u64,
    out_of_order: BTreeSet<u64>,
}

impl ReliableReceiver {
    /// Records a data arrival and returns the cumulative ack value to send.
    pub fn on_data(&mut self, seq: u64) -> u64 {
        if seq >= self.next_expected {
            self.out_of_order.insert(seq);
            while self.out_of_order.remove(&self.next_expected) {
                self.next_expected += 1;
            }
        }
        self.next_expected
    }
}

/// Per-flow delivery ledger: first copy of each packet id counts as
/// received, later copies as duplicates.
#[derive(Debug, Default)]
pub struct DeliveryLedger {
    seen: BTreeSet<PacketId>,
}

impl DeliveryLedger {
    /// True exactly once per unique packet id.
    pub fn first_delivery(&mut self, id: PacketId) -> bool {
        self.seen.insert(id)
    }

    pub fn delivered_unique(&self) -> u64 {
        self.seen.len() as u64
    }
}
