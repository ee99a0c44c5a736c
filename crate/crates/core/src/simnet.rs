//! Deterministic discrete-event core: clock, event queue, site topology and
//! the inter-site link cost model.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::{EventLog, Record};
use crate::types::SiteId;

pub const DEFAULT_MAX_EVENTS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event at t={at} is before the current time t={now}")]
    PastEvent { at: f64, now: f64 },
    #[error("simulation exceeded {0} events without going idle")]
    NonTermination(u64),
    #[error("unknown site `{0}`")]
    UnknownSite(SiteId),
    #[error("{0}")]
    World(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submit,
    TransferDone,
    TaskDone,
    SiteDown,
    SiteUp,
    LeaseExpired,
    Preempt,
    Poll,
    RepoRequest,
    StageDone,
    Heartbeat,
    Timer,
}

/// Site availability changes that any payload type must be able to carry.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteSignal {
    Down(SiteId),
    Up(SiteId),
    Preempt(SiteId),
}

pub trait SimPayload: From<SiteSignal> {
    fn kind(&self) -> EventKind;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub at: f64,
    pub seq: u64,
    pub payload: P,
}

impl<P> Eq for Event<P> where P: PartialEq {}

impl<P: PartialEq> Ord for Event<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<P: PartialEq> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub trait World<P> {
    fn handle(&mut self, event: Event<P>, engine: &mut Engine<P>) -> Result<(), SimError>;
}

/// Single-threaded event loop ordered by `(at, seq)`.
#[derive(Debug)]
pub struct Engine<P> {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Event<P>>,
    log: EventLog,
    processed: u64,
    max_events: u64,
    trace: Vec<(f64, u64, EventKind)>,
}

impl<P: SimPayload + PartialEq> Default for Engine<P> {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_EVENTS)
    }
}

impl<P: SimPayload + PartialEq> Engine<P> {
    pub fn new(max_events: u64) -> Self {
        Engine {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            log: EventLog::new(),
            processed: 0,
            max_events,
            trace: Vec::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn schedule(&mut self, at: f64, payload: P) -> Result<u64, SimError> {
        if at.is_nan() || at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event { at, seq, payload });
        Ok(seq)
    }

    /// Schedules `delay` seconds from now.
    pub fn after(&mut self, delay: f64, payload: P) -> Result<u64, SimError> {
        self.schedule(self.now + delay.max(0.0), payload)
    }

    pub fn record(&mut self, record: Record) {
        self.log.append(self.now, record);
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// `(at, seq, kind)` of every processed event, in processing order.
    pub fn trace(&self) -> &[(f64, u64, EventKind)] {
        &self.trace
    }

    /// An infinite `up_at` takes the site down for good.
    pub fn inject_failure(
        &mut self,
        site: &SiteId,
        down_at: f64,
        up_at: f64,
    ) -> Result<(), SimError> {
        if down_at.partial_cmp(&up_at) != Some(std::cmp::Ordering::Less) {
            return Err(SimError::World(format!(
                "failure window for `{site}` must satisfy down_at < up_at"
            )));
        }
        if down_at < self.now {
            return Err(SimError::PastEvent {
                at: down_at,
                now: self.now,
            });
        }
        self.schedule(down_at, SiteSignal::Down(site.clone()).into())?;
        if up_at.is_finite() {
            self.schedule(up_at, SiteSignal::Up(site.clone()).into())?;
        }
        Ok(())
    }

    pub fn inject_preemption(&mut self, site: &SiteId, at: f64) -> Result<(), SimError> {
        self.schedule(at, SiteSignal::Preempt(site.clone()).into())?;
        Ok(())
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step<W: World<P>>(&mut self, world: &mut W) -> Result<bool, SimError> {
        let Some(event) = self.queue.pop() else {
            return Ok(false);
        };
        if self.processed >= self.max_events {
            return Err(SimError::NonTermination(self.max_events));
        }
        self.processed += 1;
        debug_assert!(event.at >= self.now);
        self.now = event.at;
        self.trace.push((event.at, event.seq, event.payload.kind()));
        world.handle(event, self)?;
        Ok(true)
    }

    /// Drains the queue and hands back the accumulated log.
    pub fn run_until_idle<W: World<P>>(&mut self, world: &mut W) -> Result<EventLog, SimError> {
        while self.step(world)? {}
        Ok(std::mem::take(&mut self.log))
    }

    /// Processes events with `at <= horizon`; later events stay queued.
    pub fn run_until<W: World<P>>(&mut self, world: &mut W, horizon: f64) -> Result<(), SimError> {
        while let Some(next) = self.queue.peek() {
            if next.at > horizon {
                break;
            }
            self.step(world)?;
        }
        Ok(())
    }

    /// Drops every queued event.
    pub fn clear(&mut self) {
        self.queue.clear();
    }

    pub fn take_log(&mut self) -> EventLog {
        std::mem::take(&mut self.log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub down_at: f64,
    pub up_at: f64,
}

fn default_true() -> bool {
    true
}

fn default_partition() -> String {
    String::new()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteDescriptor {
    pub id: SiteId,
    pub slots: u32,
    #[serde(default = "default_partition")]
    pub partition: String,
    #[serde(default)]
    pub preemptible: bool,
    /// Storage-only sites (for example the common store) run no tasks.
    #[serde(default = "default_true")]
    pub compute: bool,
    #[serde(default)]
    pub reliability: Vec<Outage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub bandwidth_gbps: f64,
    pub latency_s: f64,
}

/// Bandwidth and latency for every ordered pair of distinct sites. The
/// diagonal is implicit: zero latency and unbounded bandwidth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkMatrix {
    links: BTreeMap<(SiteId, SiteId), Link>,
}

impl LinkMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, from: SiteId, to: SiteId, link: Link) {
        self.links.insert((from, to), link);
    }

    pub fn set_symmetric(&mut self, a: SiteId, b: SiteId, link: Link) {
        self.links.insert((a.clone(), b.clone()), link);
        self.links.insert((b, a), link);
    }

    pub fn get(&self, from: &SiteId, to: &SiteId) -> Option<Link> {
        self.links.get(&(from.clone(), to.clone())).copied()
    }

    /// Every ordered pair of distinct sites lacking a link.
    pub fn missing_pairs<'a>(&self, sites: impl Iterator<Item = &'a SiteId> + Clone) -> Vec<(SiteId, SiteId)> {
        let mut missing = Vec::new();
        for a in sites.clone() {
            for b in sites.clone() {
                if a != b && !self.links.contains_key(&(a.clone(), b.clone())) {
                    missing.push((a.clone(), b.clone()));
                }
            }
        }
        missing
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(SiteId, SiteId), &Link)> {
        self.links.iter()
    }
}

/// Sites plus the links between them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Topology {
    sites: BTreeMap<SiteId, SiteDescriptor>,
    links: LinkMatrix,
}

impl Topology {
    pub fn new(sites: Vec<SiteDescriptor>, links: LinkMatrix) -> Self {
        Topology {
            sites: sites.into_iter().map(|s| (s.id.clone(), s)).collect(),
            links,
        }
    }

    pub fn site(&self, id: &SiteId) -> Option<&SiteDescriptor> {
        self.sites.get(id)
    }

    pub fn contains(&self, id: &SiteId) -> bool {
        self.sites.contains_key(id)
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteDescriptor> {
        self.sites.values()
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &SiteId> + Clone {
        self.sites.keys()
    }

    pub fn compute_sites(&self) -> impl Iterator<Item = &SiteDescriptor> {
        self.sites.values().filter(|s| s.compute)
    }

    pub fn links(&self) -> &LinkMatrix {
        &self.links
    }

    /// Seconds to move `size_bytes` from one site to another:
    /// `latency + bytes / (gbps * 1e9 / 8)`, and zero for local access.
    pub fn transfer_time(&self, size_bytes: u64, from: &SiteId, to: &SiteId) -> Result<f64, SimError> {
        for s in [from, to] {
            if !self.contains(s) {
                return Err(SimError::UnknownSite(s.clone()));
            }
        }
        if from == to {
            return Ok(0.0);
        }
        let link = self
            .links
            .get(from, to)
            .ok_or_else(|| SimError::World(format!("no link {from} -> {to}")))?;
        Ok(link_time(size_bytes, link))
    }

    pub fn latency(&self, from: &SiteId, to: &SiteId) -> f64 {
        if from == to {
            return 0.0;
        }
        self.links.get(from, to).map(|l| l.latency_s).unwrap_or(0.0)
    }
}

pub(crate) fn link_time(size_bytes: u64, link: Link) -> f64 {
    let bits = size_bytes as f64 * 8.0;
    link.latency_s + bits / (link.bandwidth_gbps * 1e9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    enum Ev {
        Tick(u32),
        Site(SiteSignal),
    }

    impl From<SiteSignal> for Ev {
        fn from(s: SiteSignal) -> Self {
            Ev::Site(s)
        }
    }

    impl SimPayload for Ev {
        fn kind(&self) -> EventKind {
            match self {
                Ev::Tick(_) => EventKind::Timer,
                Ev::Site(SiteSignal::Down(_)) => EventKind::SiteDown,
                Ev::Site(SiteSignal::Up(_)) => EventKind::SiteUp,
                Ev::Site(SiteSignal::Preempt(_)) => EventKind::Preempt,
            }
        }
    }

    #[derive(Default)]
    struct Recorder(Vec<(f64, Ev)>);

    impl World<Ev> for Recorder {
        fn handle(&mut self, event: Event<Ev>, engine: &mut Engine<Ev>) -> Result<(), SimError> {
            if let Ev::Tick(n) = event.payload {
                if n > 0 {
                    engine.after(1.0, Ev::Tick(n - 1))?;
                }
            }
            self.0.push((event.at, event.payload));
            Ok(())
        }
    }

    fn topo() -> Topology {
        let sites = ["a", "b"]
            .into_iter()
            .map(|s| SiteDescriptor {
                id: s.into(),
                slots: 1,
                partition: String::new(),
                preemptible: false,
                compute: true,
                reliability: vec![],
            })
            .collect();
        let mut links = LinkMatrix::new();
        links.set_symmetric(
            "a".into(),
            "b".into(),
            Link {
                bandwidth_gbps: 8.0,
                latency_s: 0.0,
            },
        );
        Topology::new(sites, links)
    }

    #[test]
    fn schedule_rejects_past() {
        let mut e: Engine<Ev> = Engine::default();
        let mut w = Recorder::default();
        e.schedule(3.0, Ev::Tick(0)).unwrap();
        e.step(&mut w).unwrap();
        assert!(e.schedule(5.0, Ev::Tick(0)).is_ok());
        assert_eq!(
            e.schedule(2.0, Ev::Tick(0)),
            Err(SimError::PastEvent { at: 2.0, now: 3.0 })
        );
    }

    #[test]
    fn same_time_events_follow_seq() {
        let mut e: Engine<Ev> = Engine::default();
        let mut w = Recorder::default();
        e.schedule(5.0, Ev::Tick(0)).unwrap();
        e.schedule(5.0, Ev::Site(SiteSignal::Up("a".into()))).unwrap();
        e.schedule(1.0, Ev::Site(SiteSignal::Down("a".into()))).unwrap();
        e.run_until_idle(&mut w).unwrap();
        let order: Vec<_> = w.0.iter().map(|(_, p)| p.clone()).collect();
        assert_eq!(
            order,
            vec![
                Ev::Site(SiteSignal::Down("a".into())),
                Ev::Tick(0),
                Ev::Site(SiteSignal::Up("a".into()))
            ]
        );
        let seqs: Vec<_> = e.trace().iter().map(|t| t.1).collect();
        assert_eq!(seqs, vec![2, 0, 1]);
    }

    #[test]
    fn empty_queue_gives_empty_log() {
        let mut e: Engine<Ev> = Engine::default();
        assert!(e.run_until_idle(&mut Recorder::default()).unwrap().is_empty());
    }

    #[test]
    fn event_guard_aborts() {
        let mut e: Engine<Ev> = Engine::new(10);
        e.schedule(0.0, Ev::Tick(100)).unwrap();
        assert_eq!(
            e.run_until_idle(&mut Recorder::default()),
            Err(SimError::NonTermination(10))
        );
    }

    #[test]
    fn failure_injection_schedules_both_edges() {
        let mut e: Engine<Ev> = Engine::default();
        let mut w = Recorder::default();
        e.inject_failure(&"a".into(), 10.0, 20.0).unwrap();
        e.run_until_idle(&mut w).unwrap();
        assert_eq!(w.0.len(), 2);
        assert_eq!(w.0[0].0, 10.0);
        assert_eq!(w.0[1].0, 20.0);
        assert!(e.inject_failure(&"a".into(), 5.0, 30.0).is_err());
    }

    #[test]
    fn transfer_time_examples() {
        let t = topo();
        assert_eq!(t.transfer_time(1_000_000_000, &"a".into(), &"b".into()), Ok(1.0));
        assert_eq!(t.transfer_time(123, &"a".into(), &"a".into()), Ok(0.0));
        assert!(matches!(
            t.transfer_time(1, &"a".into(), &"z".into()),
            Err(SimError::UnknownSite(_))
        ));
        let slow = Link {
            bandwidth_gbps: 1.0,
            latency_s: 0.2,
        };
        assert_eq!(link_time(0, slow), 0.2);
    }
}
