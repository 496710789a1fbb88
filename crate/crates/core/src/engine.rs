//! Deterministic discrete-event engine.
//!
//! Time advances in integer slots. The slot length follows the configured
//! numerology (`1000 / 2^mu` microseconds) and is fixed for a whole run.
//! Events firing on the same slot are dispatched in insertion order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Identifier of any simulated node (vehicle, eNodeB/RSU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Subcarrier numerology `mu`; the slot lasts `1000 / 2^mu` microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Numerology(u8);

impl Numerology {
    pub const LTE: Numerology = Numerology(0);

    pub fn new(mu: u8) -> Result<Self, SimError> {
        if mu > 3 {
            return Err(SimError::Config(format!(
                "numerology mu must be in 0..=3, got {mu}"
            )));
        }
        Ok(Numerology(mu))
    }

    pub fn mu(self) -> u8 {
        self.0
    }

    pub fn slot_duration_us(self) -> u32 {
        1000 >> self.0
    }

    pub fn slots_per_ms(self) -> u64 {
        1 << self.0
    }

    /// Converts a duration in milliseconds to whole slots.
    pub fn ms_to_ticks(self, ms: u64) -> u64 {
        ms * self.slots_per_ms()
    }

    pub fn ticks_to_ms(self, ticks: u64) -> f64 {
        ticks as f64 / self.slots_per_ms() as f64
    }
}

impl Default for Numerology {
    fn default() -> Self {
        Numerology::LTE
    }
}

impl TryFrom<u8> for Numerology {
    type Error = SimError;

    fn try_from(mu: u8) -> Result<Self, Self::Error> {
        Numerology::new(mu)
    }
}

impl From<Numerology> for u8 {
    fn from(n: Numerology) -> u8 {
        n.0
    }
}

/// A point on the simulation clock, counted in slots.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct SimTime {
    pub ticks: u64,
}

impl SimTime {
    pub const ZERO: SimTime = SimTime { ticks: 0 };

    pub fn from_ticks(ticks: u64) -> Self {
        SimTime { ticks }
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.ticks)
    }
}

/// A scheduled event. `seq` is assigned by the engine and breaks ties
/// between events firing on the same slot.
#[derive(Debug, Clone)]
pub struct Event<K> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub kind: K,
}

struct Queued<K>(Event<K>);

impl<K> Queued<K> {
    fn key(&self) -> (u64, u64) {
        (self.0.fire_at.ticks, self.0.seq)
    }
}

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<K> Eq for Queued<K> {}

impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Queued<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// One line of the dispatch log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchRecord {
    pub tick: u64,
    pub seq: u64,
    pub target: NodeId,
    pub tag: &'static str,
}

/// Events carry a short static tag for the dispatch log.
pub trait EventTag {
    fn tag(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub dispatched: u64,
    pub clock: SimTime,
}

pub struct Engine<K> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<K>>>,
    dispatched: u64,
    log: Option<Vec<DispatchRecord>>,
}

impl<K: EventTag> Engine<K> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            dispatched: 0,
            log: None,
        }
    }

    /// Keeps a full dispatch log; used by determinism checks.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn log(&self) -> Option<&[DispatchRecord]> {
        self.log.as_deref()
    }

    /// Enqueues an event. Scheduling before the current clock is a logic
    /// error and is rejected.
    pub fn schedule(&mut self, fire_at: SimTime, target: NodeId, kind: K) -> Result<u64, SimError> {
        if fire_at < self.now {
            return Err(SimError::PastEvent {
                now: self.now.ticks,
                fire_at: fire_at.ticks,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(Event {
            fire_at,
            seq,
            target,
            kind,
        })));
        Ok(seq)
    }

    /// Pops the next event due at or before `end`, advancing the clock to
    /// its firing time.
    pub fn pop_due(&mut self, end: SimTime) -> Option<Event<K>> {
        let due = matches!(self.queue.peek(), Some(Reverse(q)) if q.0.fire_at <= end);
        if !due {
            return None;
        }
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.now = ev.fire_at;
        self.dispatched += 1;
        if let Some(log) = self.log.as_mut() {
            log.push(DispatchRecord {
                tick: ev.fire_at.ticks,
                seq: ev.seq,
                target: ev.target,
                tag: ev.kind.tag(),
            });
        }
        Some(ev)
    }

    /// Dispatches every event with `fire_at <= end` through `handler`, then
    /// sets the clock to `end`. Handlers may schedule further events,
    /// including on the current slot.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> Result<RunSummary, SimError>
    where
        F: FnMut(&mut Self, Event<K>) -> Result<(), SimError>,
    {
        let before = self.dispatched;
        while let Some(ev) = self.pop_due(end) {
            handler(self, ev)?;
        }
        if end > self.now {
            self.now = end;
        }
        Ok(RunSummary {
            dispatched: self.dispatched - before,
            clock: self.now,
        })
    }
}

impl<K: EventTag> Default for Engine<K> {
    fn default() -> Self {
        Self::new()
    }
}

/// Purposes for which a node owns an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamPurpose {
    Cam = 1,
    Alert = 2,
    Selection = 3,
    Mobility = 4,
    Placement = 5,
    Reselection = 6,
}

/// Identifies one deterministic random stream: the run seed plus a
/// `(node, purpose)` stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, node: NodeId, purpose: StreamPurpose) -> Self {
        RngStream {
            seed,
            stream_id: ((node.0 as u64) << 8) | purpose as u64,
        }
    }

    /// ChaCha8 keyed by the seed, on the stream selected by `stream_id`.
    /// The output is platform independent.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
