//! Discrete-event packet network with a virtual microsecond clock.
//!
//! All randomness is keyed hashing of the seed and packet identity, so a run
//! is a pure function of its configuration. Every ping round trip that
//! completes is checked against the speed-of-light floor for the two
//! endpoints' true locations.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{haversine_km, DelayMicros, GeoPoint, NodeId, Timestamp};
use crate::probe::{Datagram, Transport, TransportError};
use crate::sim::overhead::{keyed_unit, OverheadModel};
use crate::sim::SimError;
use crate::wire::{decode_ping, encode_ping, Direction};

/// Signal speed in fibre, km per microsecond.
pub const FIBRE_KM_PER_US: f64 = 0.2;
/// Speed of light in vacuum, km per microsecond.
pub const LIGHT_KM_PER_US: f64 = 0.3;

static GLOBAL_ROUND_TRIPS: AtomicU64 = AtomicU64::new(0);
static GLOBAL_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// (round trips checked, light-floor violations) across every network in the process.
pub fn global_soundness() -> (u64, u64) {
    (GLOBAL_ROUND_TRIPS.load(Ordering::Relaxed), GLOBAL_VIOLATIONS.load(Ordering::Relaxed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    /// Route length over great-circle length, applied at vacuum light speed.
    pub path_inflation: f64,
    /// Fixed switching delay per one-way leg.
    pub per_hop_us: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { path_inflation: 1.5, per_hop_us: 1000 }
    }
}

impl TopologyConfig {
    /// Straight-line, zero-switching topology for calibration runs.
    pub fn ideal() -> Self {
        Self { path_inflation: 1.0, per_hop_us: 0 }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !self.path_inflation.is_finite() || self.path_inflation < 1.0 {
            return Err(SimError::Config("path_inflation must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimNode {
    pub id: NodeId,
    pub location: GeoPoint,
    pub overhead: OverheadModel,
    /// Network echoes ping requests on the node's behalf.
    pub auto_respond: bool,
}

/// Delay and loss injected by the operator of a host or the path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdversaryPolicy {
    /// Extra one-way delay on a directed link.
    pub link_delay: BTreeMap<(NodeId, NodeId), u64>,
    /// Extra one-way delay on every packet to or from a node.
    pub node_delay: BTreeMap<NodeId, u64>,
    /// Uniform extra delay in `[0, jitter_us]` per packet.
    pub jitter_us: u64,
    pub drop_probability: f64,
}

impl AdversaryPolicy {
    fn added_delay(&self, seed: u64, from: NodeId, to: NodeId, key: &[u8]) -> u64 {
        let mut d = self.link_delay.get(&(from, to)).copied().unwrap_or(0);
        d += self.node_delay.get(&from).copied().unwrap_or(0);
        d += self.node_delay.get(&to).copied().unwrap_or(0);
        if self.jitter_us > 0 {
            let u = keyed_unit(&[&seed.to_be_bytes(), b"jitter", from.as_bytes(), to.as_bytes(), key]);
            d += (u * (self.jitter_us + 1) as f64) as u64;
        }
        d
    }

    fn drops(&self, seed: u64, from: NodeId, to: NodeId, key: &[u8]) -> bool {
        self.drop_probability > 0.0
            && keyed_unit(&[&seed.to_be_bytes(), b"drop", from.as_bytes(), to.as_bytes(), key])
                < self.drop_probability
    }
}

/// Identity of one packet for keyed randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketKey {
    pub session: [u8; 16],
    pub seq: u32,
    pub direction: Direction,
}

impl PacketKey {
    fn of(bytes: &[u8]) -> Self {
        match decode_ping(bytes) {
            Ok(p) => Self { session: p.session_id, seq: p.seq, direction: p.direction },
            Err(_) => {
                let digest = <sha2::Sha256 as sha2::Digest>::digest(bytes);
                let mut session = [0u8; 16];
                session.copy_from_slice(&digest[..16]);
                Self { session, seq: u32::MAX, direction: Direction::Request }
            }
        }
    }

    fn bytes(&self) -> [u8; 21] {
        let mut out = [0u8; 21];
        out[..16].copy_from_slice(&self.session);
        out[16..20].copy_from_slice(&self.seq.to_be_bytes());
        out[20] = self.direction as u8;
        out
    }
}

/// One-way delay of `key` from `src` to `dst`.
///
/// The overhead of both hosts is drawn once per round trip, with a single
/// uniform shared by both ends, and split between the request and echo legs.
pub fn simulate_link_delay(
    topology: &TopologyConfig,
    adversary: &AdversaryPolicy,
    seed: u64,
    src: &SimNode,
    dst: &SimNode,
    key: &PacketKey,
) -> DelayMicros {
    let km = haversine_km(src.location, dst.location).km();
    let propagation = (km / LIGHT_KM_PER_US * topology.path_inflation).ceil() as u64;
    let (lo, hi) = if src.id <= dst.id { (src.id, dst.id) } else { (dst.id, src.id) };
    let u = keyed_unit(&[
        &seed.to_be_bytes(),
        b"overhead",
        lo.as_bytes(),
        hi.as_bytes(),
        &key.session,
        &key.seq.to_be_bytes(),
    ]);
    let total = (src.overhead.quantile(u) + dst.overhead.quantile(u)).round() as u64;
    let share = match key.direction {
        Direction::Request => total - total / 2,
        Direction::Echo => total / 2,
    };
    let extra = adversary.added_delay(seed, src.id, dst.id, &key.bytes());
    DelayMicros(propagation + topology.per_hop_us + share + extra)
}

/// Soundness and traffic counters for one network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub packets: u64,
    pub dropped: u64,
    pub round_trips: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    at: u64,
    order: u64,
    from: NodeId,
    to: NodeId,
    bytes: Vec<u8>,
}

struct NetState {
    seed: u64,
    start: Timestamp,
    clock: u64,
    order: u64,
    topology: TopologyConfig,
    adversary: AdversaryPolicy,
    nodes: BTreeMap<NodeId, SimNode>,
    queue: BinaryHeap<Reverse<Event>>,
    inboxes: HashMap<NodeId, VecDeque<Datagram<NodeId>>>,
    in_flight: HashMap<(NodeId, [u8; 16], u32), (u64, f64)>,
    stats: NetStats,
}

impl NetState {
    fn send(&mut self, from: NodeId, to: NodeId, bytes: Vec<u8>) {
        self.stats.packets += 1;
        let (Some(src), Some(dst)) = (self.nodes.get(&from), self.nodes.get(&to)) else {
            self.stats.dropped += 1;
            return;
        };
        let key = PacketKey::of(&bytes);
        if self.adversary.drops(self.seed, from, to, &key.bytes()) {
            self.stats.dropped += 1;
            return;
        }
        let delay = simulate_link_delay(&self.topology, &self.adversary, self.seed, src, dst, &key);
        if key.direction == Direction::Request && key.seq != u32::MAX {
            let floor = 2.0 * haversine_km(src.location, dst.location).km() / LIGHT_KM_PER_US;
            self.in_flight.insert((from, key.session, key.seq), (self.clock, floor));
        }
        self.order += 1;
        let ev = Event { at: self.clock + delay.0, order: self.order, from, to, bytes };
        self.queue.push(Reverse(ev));
    }

    /// Delivers one event; returns the datagram if nobody else consumed it.
    fn deliver(&mut self, ev: Event) -> Option<Datagram<NodeId>> {
        let ping = decode_ping(&ev.bytes).ok();
        if let Some(p) = ping {
            if p.direction == Direction::Echo {
                if let Some((sent, floor)) = self.in_flight.remove(&(ev.to, p.session_id, p.seq)) {
                    self.stats.round_trips += 1;
                    GLOBAL_ROUND_TRIPS.fetch_add(1, Ordering::Relaxed);
                    if ((ev.at - sent) as f64) < floor {
                        self.stats.violations += 1;
                        GLOBAL_VIOLATIONS.fetch_add(1, Ordering::Relaxed);
                        log::error!("round trip {}us below light floor {floor:.1}us", ev.at - sent);
                    }
                }
            } else if self.nodes.get(&ev.to).is_some_and(|n| n.auto_respond) {
                self.send(ev.to, ev.from, encode_ping(&p.echo()).to_vec());
                return None;
            }
        }
        Some(Datagram { bytes: ev.bytes, from: ev.from, at_micros: ev.at })
    }

    fn pop_due(&mut self, until: u64) -> Option<Event> {
        match self.queue.peek() {
            Some(Reverse(ev)) if ev.at <= until => {
                let Reverse(ev) = self.queue.pop().expect("peeked");
                self.clock = self.clock.max(ev.at);
                Some(ev)
            }
            _ => None,
        }
    }
}

/// Shared handle to a simulated network. Cloning shares the same state.
#[derive(Clone)]
pub struct SimNetwork {
    inner: Rc<RefCell<NetState>>,
}

impl SimNetwork {
    pub fn new(topology: TopologyConfig, seed: u64, start: Timestamp) -> Result<Self, SimError> {
        topology.validate()?;
        Ok(Self {
            inner: Rc::new(RefCell::new(NetState {
                seed,
                start,
                clock: 0,
                order: 0,
                topology,
                adversary: AdversaryPolicy::default(),
                nodes: BTreeMap::new(),
                queue: BinaryHeap::new(),
                inboxes: HashMap::new(),
                in_flight: HashMap::new(),
                stats: NetStats::default(),
            })),
        })
    }

    pub fn add_node(&self, node: SimNode) -> Result<(), SimError> {
        let mut s = self.inner.borrow_mut();
        if s.nodes.contains_key(&node.id) {
            return Err(SimError::Config(format!("duplicate node {}", node.id)));
        }
        s.nodes.insert(node.id, node);
        Ok(())
    }

    pub fn relocate(&self, id: NodeId, location: GeoPoint) -> Result<(), SimError> {
        let mut s = self.inner.borrow_mut();
        let node = s.nodes.get_mut(&id).ok_or_else(|| SimError::Config(format!("unknown node {id}")))?;
        node.location = location;
        Ok(())
    }

    pub fn location(&self, id: NodeId) -> Option<GeoPoint> {
        self.inner.borrow().nodes.get(&id).map(|n| n.location)
    }

    pub fn set_adversary(&self, policy: AdversaryPolicy) {
        self.inner.borrow_mut().adversary = policy;
    }

    pub fn now_micros(&self) -> u64 {
        self.inner.borrow().clock
    }

    pub fn utc_now(&self) -> Timestamp {
        let s = self.inner.borrow();
        s.start + chrono::Duration::microseconds(s.clock as i64)
    }

    /// Lets `d` of virtual time pass, delivering whatever falls due.
    pub fn advance(&self, d: Duration) {
        let mut s = self.inner.borrow_mut();
        let until = s.clock + d.as_micros() as u64;
        while let Some(ev) = s.pop_due(until) {
            let to = ev.to;
            if let Some(dg) = s.deliver(ev) {
                s.inboxes.entry(to).or_default().push_back(dg);
            }
        }
        s.clock = until;
    }

    /// One-way delay `key` would see from `src` to `dst` right now.
    pub fn link_delay(&self, src: NodeId, dst: NodeId, key: &PacketKey) -> Result<DelayMicros, SimError> {
        let s = self.inner.borrow();
        let a = s.nodes.get(&src).ok_or(SimError::UnknownNode(src))?;
        let b = s.nodes.get(&dst).ok_or(SimError::UnknownNode(dst))?;
        Ok(simulate_link_delay(&s.topology, &s.adversary, s.seed, a, b, key))
    }

    pub fn stats(&self) -> NetStats {
        self.inner.borrow().stats
    }

    /// Transport bound to `node`.
    pub fn transport(&self, node: NodeId) -> SimTransport {
        SimTransport { net: self.clone(), node, close_when_idle: false }
    }
}

/// A node's view of the network. With `close_when_idle`, `recv` reports
/// `Closed` once no event is pending, which ends serve loops.
pub struct SimTransport {
    net: SimNetwork,
    node: NodeId,
    pub close_when_idle: bool,
}

impl SimTransport {
    pub fn node(&self) -> NodeId {
        self.node
    }
}

impl Transport for SimTransport {
    type Addr = NodeId;

    fn send(&mut self, bytes: &[u8], to: &NodeId) -> Result<(), TransportError> {
        self.net.inner.borrow_mut().send(self.node, *to, bytes.to_vec());
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Datagram<NodeId>>, TransportError> {
        let mut s = self.net.inner.borrow_mut();
        let deadline = s.clock + timeout.as_micros() as u64;
        loop {
            if let Some(d) = s.inboxes.get_mut(&self.node).and_then(|q| q.pop_front()) {
                return Ok(Some(d));
            }
            match s.pop_due(deadline) {
                Some(ev) => {
                    let to = ev.to;
                    if let Some(dg) = s.deliver(ev) {
                        if to == self.node {
                            return Ok(Some(dg));
                        }
                        s.inboxes.entry(to).or_default().push_back(dg);
                    }
                }
                None => {
                    if self.close_when_idle && s.queue.is_empty() {
                        return Err(TransportError::Closed);
                    }
                    s.clock = s.clock.max(deadline);
                    return Ok(None);
                }
            }
        }
    }

    fn now_micros(&self) -> u64 {
        self.net.now_micros()
    }

    fn utc_now(&self) -> Timestamp {
        self.net.utc_now()
    }
}
