//! Deterministic discrete-event engine: virtual clock, time-ordered event
//! queue and seeded random streams.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in seconds since the start of a run.
///
/// Always finite and non-negative; totally ordered so it can key the event
/// queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on NaN, infinite or negative input. Negative zero is
    /// normalized so equality and `total_cmp` agree.
    pub fn from_secs(secs: f64) -> SimTime {
        assert!(
            secs.is_finite() && secs >= 0.0,
            "invalid simulation time: {secs}"
        );
        SimTime(if secs == 0.0 { 0.0 } else { secs })
    }

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime::from_secs(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime::from_secs(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("cannot schedule event at {at} before current time {now}")]
    InThePast { at: SimTime, now: SimTime },
}

/// Opaque handle returned by [`Scheduler::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EventHandle(u64);

struct Entry<A> {
    at: SimTime,
    seq: u64,
    action: A,
}

// BinaryHeap is a max-heap; reverse so (earliest time, lowest sequence) pops
// first. Equal fire times resolve by insertion order.
impl<A> Ord for Entry<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}
impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<A> Eq for Entry<A> {}

/// Time-ordered event queue with a virtual clock.
///
/// Generic over the action payload so the engine can route events to the
/// module that owns them.
pub struct Scheduler<A> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<A>>,
    cancelled: BTreeSet<u64>,
    processed: u64,
}

impl<A> Default for Scheduler<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> Scheduler<A> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, at: SimTime, action: A) -> Result<EventHandle, ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::InThePast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, action });
        Ok(EventHandle(seq))
    }

    /// Cancelled events are skipped when they surface; their actions never run.
    pub fn cancel(&mut self, handle: EventHandle) {
        self.cancelled.insert(handle.0);
    }

    /// Pops the next live event with fire time <= `t_end`, advancing the
    /// clock to its fire time. When none remain the clock advances to
    /// `t_end` and `None` is returned.
    pub fn next_until(&mut self, t_end: SimTime) -> Option<(SimTime, A)> {
        loop {
            match self.heap.peek() {
                Some(entry) if entry.at <= t_end => {
                    let entry = self.heap.pop().expect("peeked entry");
                    if self.cancelled.remove(&entry.seq) {
                        continue;
                    }
                    debug_assert!(entry.at >= self.now, "event queue went backwards");
                    self.now = entry.at;
                    self.processed += 1;
                    return Some((entry.at, entry.action));
                }
                _ => {
                    if t_end > self.now {
                        self.now = t_end;
                    }
                    return None;
                }
            }
        }
    }

    /// Drains and handles every event up to `t_end`; returns how many ran.
    pub fn run_until(&mut self, t_end: SimTime, mut handler: impl FnMut(SimTime, A)) -> u64 {
        let mut count = 0;
        while let Some((at, action)) = self.next_until(t_end) {
            handler(at, action);
            count += 1;
        }
        count
    }
}

/// Seeded pseudo-random stream with a fixed, portable generator so a seed
/// reproduces the same draw sequence on every platform.
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> RandomStream {
        RandomStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }
}

/// Derives independent named sub-streams from one master seed, so adding a
/// consumer does not perturb the draws any other consumer sees.
pub struct StreamFactory {
    master_seed: u64,
}

impl StreamFactory {
    pub fn new(master_seed: u64) -> StreamFactory {
        StreamFactory { master_seed }
    }

    pub fn stream(&self, name: &str) -> RandomStream {
        RandomStream::new(splitmix64(self.master_seed ^ fnv1a64(name.as_bytes())))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
