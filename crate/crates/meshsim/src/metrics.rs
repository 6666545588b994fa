//! Run counters and the derived metrics: packet delivery ratio, packet loss
//! and average / binned throughput.

use serde::Serialize;

/// Data-plane counters, kept per flow and summed for the run total.
/// `sent` and `received` use unique-id accounting: a retransmitted copy
/// never increments `sent`, a duplicate arrival never increments `received`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub sent: u64,
    pub received: u64,
    pub duplicates: u64,
    pub retransmissions: u64,
    pub dropped_queue: u64,
    pub dropped_noroute: u64,
    pub dropped_hopbudget: u64,
    pub dropped_linkloss: u64,
    pub bytes_delivered: u64,
    pub control_bytes_sent: u64,
    pub control_msgs_sent: u64,
    pub control_dropped: u64,
    pub acks_sent: u64,
    pub acks_delivered: u64,
    pub acks_dropped: u64,
    pub routing_errors: u64,
}

impl Counters {
    pub fn dropped_total(&self) -> u64 {
        self.dropped_queue + self.dropped_noroute + self.dropped_hopbudget + self.dropped_linkloss
    }

    pub fn add(&mut self, other: &Counters) {
        self.sent += other.sent;
        self.received += other.received;
        self.duplicates += other.duplicates;
        self.retransmissions += other.retransmissions;
        self.dropped_queue += other.dropped_queue;
        self.dropped_noroute += other.dropped_noroute;
        self.dropped_hopbudget += other.dropped_hopbudget;
        self.dropped_linkloss += other.dropped_linkloss;
        self.bytes_delivered += other.bytes_delivered;
        self.control_bytes_sent += other.control_bytes_sent;
        self.control_msgs_sent += other.control_msgs_sent;
        self.control_dropped += other.control_dropped;
        self.acks_sent += other.acks_sent;
        self.acks_delivered += other.acks_delivered;
        self.acks_dropped += other.acks_dropped;
        self.routing_errors += other.routing_errors;
    }
}

/// received / sent; `None` when nothing was sent.
pub fn pdr(c: &Counters) -> Option<f64> {
    (c.sent > 0).then(|| c.received as f64 / c.sent as f64)
}

/// (sent - received, loss ratio). Ratio is `None` when nothing was sent.
pub fn packet_loss(c: &Counters) -> (u64, Option<f64>) {
    let count = c.sent - c.received;
    (count, (c.sent > 0).then(|| count as f64 / c.sent as f64))
}

/// Delivered payload bits per second over the whole run. Headers and
/// control traffic are excluded; control cost is reported separately.
pub fn throughput_avg_bps(c: &Counters, duration_s: f64) -> f64 {
    assert!(duration_s > 0.0);
    c.bytes_delivered as f64 * 8.0 / duration_s
}

/// Conservation identity over packet copies: every injected copy is either
/// uniquely received, a duplicate arrival, dropped somewhere, or still in
/// the network when the run ends. With no retransmissions this reduces to
/// sent = received + drops + in-flight.
pub fn check_conservation(c: &Counters, in_flight_at_end: u64) -> Result<(), String> {
    let sent_copies = c.sent + c.retransmissions;
    let accounted = c.received + c.duplicates + c.dropped_total() + in_flight_at_end;
    if sent_copies == accounted {
        Ok(())
    } else {
        Err(format!(
            "conservation violated: sent {} + retransmissions {} = {} but received {} \
             + duplicates {} + drops {} + in-flight {} = {}",
            c.sent,
            c.retransmissions,
            sent_copies,
            c.received,
            c.duplicates,
            c.dropped_total(),
            in_flight_at_end,
            accounted
        ))
    }
}

/// Per-bin delivered bytes/packets, plus sent counts so a cumulative PDR can
/// be reported per bin.
#[derive(Debug, Clone, Serialize)]
pub struct TimeSeries {
    pub bin_s: f64,
    pub delivered_bytes: Vec<u64>,
    pub delivered_pkts: Vec<u64>,
    pub sent_pkts: Vec<u64>,
}

impl TimeSeries {
    pub fn new(duration_s: f64, bin_s: f64) -> TimeSeries {
        assert!(bin_s > 0.0 && duration_s >= 0.0);
        let bins = (duration_s / bin_s).floor() as usize + 1;
        TimeSeries {
            bin_s,
            delivered_bytes: vec![0; bins],
            delivered_pkts: vec![0; bins],
            sent_pkts: vec![0; bins],
        }
    }

    fn bin_of(&self, t_s: f64) -> usize {
        ((t_s / self.bin_s).floor() as usize).min(self.delivered_bytes.len() - 1)
    }

    pub fn record_delivery(&mut self, t_s: f64, payload_bytes: u64) {
        let b = self.bin_of(t_s);
        self.delivered_bytes[b] += payload_bytes;
        self.delivered_pkts[b] += 1;
    }

    pub fn record_sent(&mut self, t_s: f64) {
        let b = self.bin_of(t_s);
        self.sent_pkts[b] += 1;
    }

    pub fn bins(&self) -> usize {
        self.delivered_bytes.len()
    }

    pub fn total_delivered_bytes(&self) -> u64 {
        self.delivered_bytes.iter().sum()
    }

    pub fn total_delivered_pkts(&self) -> u64 {
        self.delivered_pkts.iter().sum()
    }
}
