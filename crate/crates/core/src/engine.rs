//! Discrete-event kernel: integer-microsecond clock, a totally ordered event
//! queue, and the SplitMix64 stream that every stochastic choice draws from.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in microseconds since run start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, us: u64) -> SimTime {
        SimTime(self.0.saturating_add(us))
    }
}

impl Sub for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0.saturating_sub(rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("event at {event} is earlier than the clock ({clock})")]
    TimeTravel { event: SimTime, clock: SimTime },
    #[error("exponential rate must be positive, got {0}")]
    NonPositiveRate(f64),
}

/// SplitMix64 generator. The whole run consumes a single stream in dispatch
/// order, so the sequence of values depends only on the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// One SplitMix64 step as a pure function of the state word.
    pub fn step(state: u64) -> (u64, u64) {
        let next = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = next;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        (z ^ (z >> 31), next)
    }

    pub fn next_u64(&mut self) -> u64 {
        let (value, next) = Self::step(self.state);
        self.state = next;
        value
    }

    /// Uniform real in [0, 1): the raw 64-bit value divided by 2^64.
    pub fn uniform01(&mut self) -> f64 {
        unit_from_u64(self.next_u64())
    }

    /// Exponential inter-arrival time in whole microseconds for `rate` events
    /// per second.
    pub fn exponential_us(&mut self, rate: f64) -> Result<u64, EngineError> {
        if rate.is_nan() || rate <= 0.0 {
            return Err(EngineError::NonPositiveRate(rate));
        }
        Ok(exponential_us_from_uniform(self.uniform01(), rate))
    }
}

pub fn unit_from_u64(value: u64) -> f64 {
    // 2^-64; values close to 2^64 round up to 1.0 in f64, clamp them back.
    let u = value as f64 * (1.0 / 18_446_744_073_709_551_616.0);
    if u >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else {
        u
    }
}

/// `-ln(1-u)/rate` seconds, rounded half-up to microseconds, at least 1 µs.
pub fn exponential_us_from_uniform(u: f64, rate: f64) -> u64 {
    let secs = -(1.0 - u).ln() / rate;
    let us = (secs * 1e6 + 0.5).floor();
    if us < 1.0 {
        1
    } else if us >= u64::MAX as f64 {
        u64::MAX
    } else {
        us as u64
    }
}

/// Position of a node inside its service: a clone/pack member, or the shared
/// backend store of a shared-disk service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeSlot {
    Member(u32),
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeKey {
    pub service: usize,
    pub slot: NodeSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detected {
    Node { node: NodeKey, epoch: u64 },
    Site { farm: usize, epoch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival {
        workload: usize,
    },
    ServiceDone {
        node: NodeKey,
        epoch: u64,
    },
    NodeFail(NodeKey),
    NodeRepair(NodeKey),
    DiskFail(NodeKey),
    DiskRepair(NodeKey),
    SiteFail {
        farm: usize,
    },
    SiteRepair {
        farm: usize,
    },
    FailureDetected(Detected),
    TakeoverDone {
        service: usize,
        partition: u32,
        member: u32,
        token: u64,
    },
    AddClone {
        service: usize,
    },
    CloneJoined {
        node: NodeKey,
    },
    AddPartition {
        service: usize,
    },
    BucketMoveDone {
        service: usize,
        bucket: u32,
        to: u32,
        token: u64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival { .. } => "Arrival",
            EventKind::ServiceDone { .. } => "ServiceDone",
            EventKind::NodeFail(_) => "NodeFail",
            EventKind::NodeRepair(_) => "NodeRepair",
            EventKind::DiskFail(_) => "DiskFail",
            EventKind::DiskRepair(_) => "DiskRepair",
            EventKind::SiteFail { .. } => "SiteFail",
            EventKind::SiteRepair { .. } => "SiteRepair",
            EventKind::FailureDetected(_) => "FailureDetected",
            EventKind::TakeoverDone { .. } => "TakeoverDone",
            EventKind::AddClone { .. } => "AddClone",
            EventKind::CloneJoined { .. } => "CloneJoined",
            EventKind::AddPartition { .. } => "AddPartition",
            EventKind::BucketMoveDone { .. } => "BucketMoveDone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: EventKind,
}

// Min-heap ordering on (time, sequence).
struct Queued(Event);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.sequence).cmp(&(self.0.time, self.0.sequence))
    }
}

/// Pending events dispatched in `(time, sequence)` order. The queue owns the
/// simulation clock, which advances to each event's time as it is popped.
#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    clock: SimTime,
    next_sequence: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64, EngineError> {
        if time < self.clock {
            return Err(EngineError::TimeTravel {
                event: time,
                clock: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(Queued(Event {
            time,
            sequence,
            kind,
        }));
        Ok(sequence)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|q| q.0.time)
    }

    /// Pops the next event if it is due at or before `limit`.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event> {
        if self.peek_time()? > limit {
            return None;
        }
        let Queued(event) = self.heap.pop()?;
        assert!(event.time >= self.clock, "clock moved backwards");
        self.clock = event.time;
        Some(event)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.pop_until(SimTime(u64::MAX))
    }

    /// Moves the clock forward without dispatching anything.
    pub fn advance_clock(&mut self, to: SimTime) {
        if to > self.clock {
            self.clock = to;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook SplitMix64 written independently of `SplitMix64::step`.
    fn reference_splitmix(seed: u64, n: usize) -> Vec<u64> {
        let mut x = seed;
        (0..n)
            .map(|_| {
                x = x.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = x;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                z ^ (z >> 31)
            })
            .collect()
    }

    #[test]
    fn splitmix_seed_zero_vectors() {
        let expected = reference_splitmix(0, 2);
        assert_eq!(expected, vec![0xE220_A839_7B1D_CDAF, 0x6E78_9E6A_A1B9_65F4]);
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn splitmix_matches_reference_for_other_seeds() {
        for seed in [1u64, 42, u64::MAX, 0xDEAD_BEEF] {
            let mut rng = SplitMix64::new(seed);
            let ours: Vec<u64> = (0..16).map(|_| rng.next_u64()).collect();
            assert_eq!(ours, reference_splitmix(seed, 16));
        }
    }

    #[test]
    fn step_is_pure() {
        let a = SplitMix64::step(12345);
        let b = SplitMix64::step(12345);
        assert_eq!(a, b);
    }

    #[test]
    fn exponential_of_half() {
        // -ln(0.5)/100 s = 6931.47 us
        assert_eq!(exponential_us_from_uniform(0.5, 100.0), 6931);
    }

    #[test]
    fn exponential_clamps_to_one_microsecond() {
        assert_eq!(exponential_us_from_uniform(0.0, 100.0), 1);
        assert_eq!(exponential_us_from_uniform(0.0, 1e12), 1);
    }

    #[test]
    fn exponential_rejects_non_positive_rate() {
        let mut rng = SplitMix64::new(1);
        assert_eq!(
            rng.exponential_us(0.0),
            Err(EngineError::NonPositiveRate(0.0))
        );
        assert!(rng.exponential_us(-3.0).is_err());
        assert!(rng.exponential_us(f64::NAN).is_err());
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        assert_eq!(unit_from_u64(0), 0.0);
        assert!(unit_from_u64(u64::MAX) < 1.0);
        assert_eq!(unit_from_u64(1 << 63), 0.5);
    }

    #[test]
    fn same_time_events_dispatch_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), EventKind::AddClone { service: 1 })
            .unwrap();
        q.schedule(SimTime(5), EventKind::AddClone { service: 2 })
            .unwrap();
        q.schedule(SimTime(3), EventKind::AddClone { service: 0 })
            .unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop())
            .map(|e| match e.kind {
                EventKind::AddClone { service } => service,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), EventKind::AddClone { service: 0 })
            .unwrap();
        q.pop().unwrap();
        assert_eq!(q.clock(), SimTime(10));
        let err = q.schedule(SimTime(9), EventKind::AddClone { service: 0 });
        assert_eq!(
            err,
            Err(EngineError::TimeTravel {
                event: SimTime(9),
                clock: SimTime(10)
            })
        );
        assert!(q
            .schedule(SimTime(10), EventKind::AddClone { service: 0 })
            .is_ok());
    }

    #[test]
    fn single_event_advances_clock() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(77), EventKind::AddPartition { service: 0 })
            .unwrap();
        let e = q.pop().unwrap();
        assert_eq!(e.time, SimTime(77));
        assert_eq!(q.clock(), SimTime(77));
        assert!(q.is_empty());
    }

    #[test]
    fn pop_until_respects_limit() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), EventKind::AddClone { service: 0 })
            .unwrap();
        q.schedule(SimTime(20), EventKind::AddClone { service: 0 })
            .unwrap();
        assert!(q.pop_until(SimTime(15)).is_some());
        assert!(q.pop_until(SimTime(15)).is_none());
        assert_eq!(q.len(), 1);
    }
}
