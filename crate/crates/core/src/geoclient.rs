//! The mesh reference node: neighbor min-delay table, signed measurement
//! bundles, shift detection and the per-connection control handler.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{AttestationResponse, ProverIdentity, SecureChannel};
use crate::crypto::{
    verify_ar, AttestationReport, KeyPair, Nonce, PkiRegistry, PublicKey, Signature,
};
use crate::model::{to_micros, DelayMicros, NodeId, Timestamp};
use crate::probe::{measure_min_delay, MinDelayRecord, ProbeError, ProbeSettings, Transport};
use crate::wire::{canonical_json, decode_frame, encode_frame, ControlMessage, ErrorMessage};

pub const DEFAULT_EXCERPT_SIZE: usize = 8;
pub const DEFAULT_HISTORY_DEPTH: usize = 32;
pub const DEFAULT_SWEEP_PERIOD: Duration = Duration::from_secs(60);
pub const DEFAULT_SHIFT_THRESHOLD_KM: f64 = 10.0;
pub const NONCE_REPLAY_WINDOW: usize = 1024;
pub const DEFAULT_CONTROL_PORT: u16 = 47475;
pub const GEOCLIENT_CODE: &[u8] = b"dgate-geoclient/1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeoClientError {
    #[error("requester is not attested on this connection")]
    NotAttested,
    #[error("nonce already used by this requester")]
    StaleNonce,
    #[error("at least two history records are needed")]
    InsufficientHistory,
    #[error("requester probe endpoint {0:?} is not usable")]
    BadEndpoint(String),
    #[error("probe failed: {0}")]
    Probe(#[from] ProbeError),
}

impl GeoClientError {
    pub fn code(&self) -> &'static str {
        match self {
            GeoClientError::NotAttested => "NotAttested",
            GeoClientError::StaleNonce => "StaleNonce",
            GeoClientError::InsufficientHistory => "InsufficientHistory",
            GeoClientError::BadEndpoint(_) => "BadEndpoint",
            GeoClientError::Probe(_) => "ProbeFailed",
        }
    }
}

/// Asks a GeoClient to measure the requester and sign the result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRequest {
    pub round: Nonce,
    pub nonce: Nonce,
    pub repetitions: u32,
    pub timeout_ms: u64,
    pub requester: NodeId,
    /// Where the GeoClient should send its pings.
    pub requester_probe: String,
    /// Requester's own report over the GeoClient's counter challenge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester_report: Option<AttestationReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborEntry {
    pub peer: NodeId,
    pub record: MinDelayRecord,
    /// Oldest first; the newest element equals `record`.
    pub history: Vec<MinDelayRecord>,
}

impl NeighborEntry {
    pub fn new(record: MinDelayRecord) -> Self {
        Self { peer: record.peer, record, history: vec![record] }
    }

    pub fn push(&mut self, record: MinDelayRecord, depth: usize) {
        self.record = record;
        self.history.push(record);
        if self.history.len() > depth.max(1) {
            let excess = self.history.len() - depth.max(1);
            self.history.drain(..excess);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedMeasurements {
    pub issuer: NodeId,
    pub direct_min_delay: MinDelayRecord,
    pub neighbor_excerpt: Vec<MinDelayRecord>,
    pub system_time: Timestamp,
    pub nonce: Nonce,
    pub signature: Signature,
}

#[derive(Serialize)]
struct SmView<'a> {
    issuer: &'a NodeId,
    direct_min_delay: &'a MinDelayRecord,
    neighbor_excerpt: &'a [MinDelayRecord],
    system_time: &'a Timestamp,
    nonce: &'a Nonce,
}

impl SignedMeasurements {
    /// Signs a bundle; the excerpt is sorted ascending by delay first.
    pub fn new(
        issuer: NodeId,
        direct_min_delay: MinDelayRecord,
        mut neighbor_excerpt: Vec<MinDelayRecord>,
        system_time: Timestamp,
        nonce: Nonce,
        key: &KeyPair,
    ) -> Self {
        neighbor_excerpt.sort_by_key(|r| (r.min_rtt, r.peer));
        let mut sm = Self {
            issuer,
            direct_min_delay,
            neighbor_excerpt,
            system_time: to_micros(system_time),
            nonce,
            signature: Signature::from_bytes([0; 64]),
        };
        sm.signature = key.sign(&sm.signing_bytes());
        sm
    }

    /// Canonical JSON of every field except the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical_json(&SmView {
            issuer: &self.issuer,
            direct_min_delay: &self.direct_min_delay,
            neighbor_excerpt: &self.neighbor_excerpt,
            system_time: &self.system_time,
            nonce: &self.nonce,
        })
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvidence {
    /// The node that observed the change.
    pub neighbor: NodeId,
    pub historical: DelayMicros,
    pub new: DelayMicros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftAlert {
    pub subject: NodeId,
    pub evidence: Vec<ShiftEvidence>,
    pub severity_km: f64,
}

fn delta_km(a: DelayMicros, b: DelayMicros) -> f64 {
    (a.0.abs_diff(b.0) as f64 * 3.0) / 20.0
}

/// Flags `entry.peer` when its newest floor moved more than `threshold_km`
/// from the lowest earlier floor, in either direction.
pub fn detect_shift(
    observer: NodeId,
    entry: &NeighborEntry,
    threshold_km: f64,
) -> Result<Option<ShiftAlert>, GeoClientError> {
    let Some((newest, earlier)) = entry.history.split_last() else {
        return Err(GeoClientError::InsufficientHistory);
    };
    let Some(floor) = earlier.iter().map(|r| r.min_rtt).min() else {
        return Err(GeoClientError::InsufficientHistory);
    };
    let severity_km = delta_km(newest.min_rtt, floor);
    Ok((severity_km > threshold_km).then(|| ShiftAlert {
        subject: entry.peer,
        evidence: vec![ShiftEvidence { neighbor: observer, historical: floor, new: newest.min_rtt }],
        severity_km,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoClientConfig {
    pub excerpt_size: usize,
    pub history_depth: usize,
    #[serde(with = "secs")]
    pub sweep_period: Duration,
    pub shift_threshold_km: f64,
    /// Refuse measurement requests from requesters that did not attest.
    pub require_mutual_attestation: bool,
}

impl Default for GeoClientConfig {
    fn default() -> Self {
        Self {
            excerpt_size: DEFAULT_EXCERPT_SIZE,
            history_depth: DEFAULT_HISTORY_DEPTH,
            sweep_period: DEFAULT_SWEEP_PERIOD,
            shift_threshold_km: DEFAULT_SHIFT_THRESHOLD_KM,
            require_mutual_attestation: false,
        }
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

/// How far a control connection got through attestation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionTrust {
    Unattested,
    /// This GeoClient attested and the channel is up.
    Encrypted,
    /// The requester also attested against our counter challenge.
    MutuallyAttested,
}

/// Deliberate misbehaviour used to model a compromised reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmFault {
    /// Halve the signed direct delay after signing.
    UnderstateDelay,
}

#[derive(Debug, Default)]
struct SeenNonces {
    order: VecDeque<Nonce>,
    set: HashSet<Nonce>,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub updated: Vec<NodeId>,
    pub gaps: Vec<(NodeId, ProbeError)>,
    pub alerts: Vec<ShiftAlert>,
}

/// A GeoClient's state. Methods take `&self`; the neighbor table sits behind
/// a reader/writer lock so the sweeper can update it while SMs are issued.
#[derive(Debug)]
pub struct GeoClient {
    prover: ProverIdentity,
    config: GeoClientConfig,
    registry: PkiRegistry,
    clock_offset: Mutex<chrono::Duration>,
    fault: Mutex<Option<SmFault>>,
    table: RwLock<BTreeMap<NodeId, NeighborEntry>>,
    seen: Mutex<HashMap<NodeId, SeenNonces>>,
    sweeps: AtomicU64,
}

impl GeoClient {
    pub fn new(prover: ProverIdentity, config: GeoClientConfig, registry: PkiRegistry) -> Self {
        Self {
            prover,
            config,
            registry,
            clock_offset: Mutex::new(chrono::Duration::zero()),
            fault: Mutex::new(None),
            table: RwLock::new(BTreeMap::new()),
            seen: Mutex::new(HashMap::new()),
            sweeps: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> NodeId {
        self.prover.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.prover.identity.public()
    }

    pub fn prover(&self) -> &ProverIdentity {
        &self.prover
    }

    pub fn config(&self) -> &GeoClientConfig {
        &self.config
    }

    /// Local clock error relative to true time.
    pub fn set_clock_offset(&self, offset: chrono::Duration) {
        *self.clock_offset.lock().expect("clock lock") = offset;
    }

    pub fn set_fault(&self, fault: Option<SmFault>) {
        *self.fault.lock().expect("fault lock") = fault;
    }

    pub fn system_time(&self, now: Timestamp) -> Timestamp {
        now + *self.clock_offset.lock().expect("clock lock")
    }

    pub fn neighbor_table(&self) -> Vec<NeighborEntry> {
        self.table.read().expect("table lock").values().cloned().collect()
    }

    /// Current records of the K lowest-delay neighbors, ascending.
    pub fn excerpt(&self) -> Vec<MinDelayRecord> {
        let mut all: Vec<MinDelayRecord> =
            self.table.read().expect("table lock").values().map(|e| e.record).collect();
        all.sort_by_key(|r| (r.min_rtt, r.peer));
        all.truncate(self.config.excerpt_size);
        all
    }

    /// Inserts an externally obtained measurement.
    pub fn record_measurement(&self, record: MinDelayRecord) {
        let mut table = self.table.write().expect("table lock");
        match table.get_mut(&record.peer) {
            Some(e) => e.push(record, self.config.history_depth),
            None => {
                table.insert(record.peer, NeighborEntry::new(record));
            }
        }
    }

    /// Access and replay checks for an MR. Consumes the nonce on success.
    pub fn admit_request(
        &self,
        trust: ConnectionTrust,
        mr: &MeasurementRequest,
    ) -> Result<(), GeoClientError> {
        match trust {
            ConnectionTrust::Unattested => return Err(GeoClientError::NotAttested),
            ConnectionTrust::Encrypted if self.config.require_mutual_attestation => {
                return Err(GeoClientError::NotAttested)
            }
            _ => {}
        }
        let mut seen = self.seen.lock().expect("nonce lock");
        let window = seen.entry(mr.requester).or_default();
        if !window.set.insert(mr.nonce) {
            return Err(GeoClientError::StaleNonce);
        }
        window.order.push_back(mr.nonce);
        if window.order.len() > NONCE_REPLAY_WINDOW {
            let old = window.order.pop_front().expect("non-empty");
            window.set.remove(&old);
        }
        Ok(())
    }

    pub fn issue_sm(&self, direct: MinDelayRecord, nonce: Nonce, now: Timestamp) -> SignedMeasurements {
        let mut sm = SignedMeasurements::new(
            self.prover.id,
            direct,
            self.excerpt(),
            self.system_time(now),
            nonce,
            &self.prover.identity,
        );
        if let Some(SmFault::UnderstateDelay) = *self.fault.lock().expect("fault lock") {
            sm.direct_min_delay.min_rtt = DelayMicros(sm.direct_min_delay.min_rtt.0 / 2);
        }
        sm
    }

    /// Admits the MR, measures the requester over `transport` and signs.
    pub fn handle_measurement_request<T: Transport>(
        &self,
        trust: ConnectionTrust,
        mr: &MeasurementRequest,
        transport: &mut T,
        requester_addr: &T::Addr,
    ) -> Result<SignedMeasurements, GeoClientError> {
        self.admit_request(trust, mr)?;
        let settings = ProbeSettings::new(mr.repetitions, Duration::from_millis(mr.timeout_ms));
        let record =
            measure_min_delay(transport, requester_addr, mr.requester, &settings, *mr.nonce.as_bytes())?;
        Ok(self.issue_sm(record, mr.nonce, transport.utc_now()))
    }

    fn sweep_session(&self, sweep: u64, peer: &NodeId) -> [u8; 16] {
        let base = self.prover.identity.derive_seed(b"sweep");
        let mut parent = [0u8; 16];
        parent.copy_from_slice(&base[..16]);
        let mut label = sweep.to_be_bytes().to_vec();
        label.extend_from_slice(peer.as_bytes());
        *Nonce::derive(&Nonce::from_bytes(parent), &label).as_bytes()
    }

    /// Measures every peer once and runs shift detection on the result.
    /// Unreachable peers are recorded as gaps.
    pub fn periodic_neighbor_sweep<T: Transport>(
        &self,
        transport: &mut T,
        peers: &[(NodeId, T::Addr)],
        settings: &ProbeSettings,
    ) -> SweepReport {
        let sweep = self.sweeps.fetch_add(1, Ordering::Relaxed);
        let mut report = SweepReport::default();
        for (peer, addr) in peers {
            if *peer == self.prover.id {
                continue;
            }
            let session = self.sweep_session(sweep, peer);
            match measure_min_delay(transport, addr, *peer, settings, session) {
                Ok(rec) => {
                    self.record_measurement(rec);
                    report.updated.push(*peer);
                    let table = self.table.read().expect("table lock");
                    if let Ok(Some(alert)) =
                        detect_shift(self.prover.id, &table[peer], self.config.shift_threshold_km)
                    {
                        log::warn!(
                            "{}: floor to {} moved {:.1} km",
                            self.prover.id,
                            alert.subject,
                            alert.severity_km
                        );
                        report.alerts.push(alert);
                    }
                }
                Err(e) => {
                    log::info!("{}: sweep gap for {}: {}", self.prover.id, peer, e);
                    report.gaps.push((*peer, e));
                }
            }
        }
        // most links moving at once points at ourselves
        if report.alerts.len() >= 2 && report.alerts.len() * 2 > report.updated.len() {
            let evidence: Vec<ShiftEvidence> = report
                .alerts
                .iter()
                .flat_map(|a| {
                    a.evidence.iter().map(move |e| ShiftEvidence { neighbor: a.subject, ..e.clone() })
                })
                .collect();
            let severity_km = report.alerts.iter().map(|a| a.severity_km).fold(0.0, f64::max);
            report.alerts.push(ShiftAlert { subject: self.prover.id, evidence, severity_km });
        }
        report
    }
}

fn error_message(code: &str, detail: impl ToString) -> ControlMessage {
    ControlMessage::Error(ErrorMessage { code: code.into(), detail: detail.to_string() })
}

/// Server side of one control connection: plaintext handshake, then sealed
/// MR/SM exchanges.
#[derive(Debug)]
pub struct GeoClientConnection {
    channel: Option<SecureChannel>,
    counter: Option<Nonce>,
}

impl Default for GeoClientConnection {
    fn default() -> Self {
        Self::new()
    }
}

impl GeoClientConnection {
    pub fn new() -> Self {
        Self { channel: None, counter: None }
    }

    /// Handles one inbound message and returns the reply bytes: a control
    /// frame before the handshake, a sealed record after it.
    pub fn handle<T, R>(
        &mut self,
        gc: &GeoClient,
        bytes: &[u8],
        transport: &mut T,
        resolve: impl Fn(&str) -> Option<T::Addr>,
        rng: &mut R,
    ) -> Vec<u8>
    where
        T: Transport,
        R: RngCore + CryptoRng,
    {
        let Some(channel) = self.channel.as_mut() else {
            let reply = match decode_frame(bytes) {
                Ok((ControlMessage::AC(ac), _)) => {
                    let counter = Nonce::random(rng);
                    let (ar, channel): (AttestationResponse, _) =
                        gc.prover.respond(&ac, Some(counter), rng);
                    self.channel = Some(channel);
                    self.counter = Some(counter);
                    ControlMessage::AR(ar)
                }
                Ok((ControlMessage::MR(_), _)) => {
                    error_message(GeoClientError::NotAttested.code(), "attest first")
                }
                Ok((other, _)) => error_message("UnexpectedMessage", other.type_name()),
                Err(e) => error_message("Malformed", e),
            };
            return encode_frame(&reply).expect("small frame");
        };

        let reply = match channel.open(bytes) {
            Ok(ControlMessage::MR(mr)) => {
                let trust = match (&mr.requester_report, &self.counter) {
                    (Some(report), Some(counter))
                        if verify_ar(report, counter, &gc.registry).into_result().is_ok() =>
                    {
                        ConnectionTrust::MutuallyAttested
                    }
                    _ => ConnectionTrust::Encrypted,
                };
                match resolve(&mr.requester_probe) {
                    None => error_message("BadEndpoint", &mr.requester_probe),
                    Some(addr) => match gc.handle_measurement_request(trust, &mr, transport, &addr) {
                        Ok(sm) => ControlMessage::SM(sm),
                        Err(e) => error_message(e.code(), e),
                    },
                }
            }
            Ok(other) => error_message("UnexpectedMessage", other.type_name()),
            Err(e) => error_message("Channel", e),
        };
        channel.seal(&reply).expect("replies fit in a frame")
    }
}
