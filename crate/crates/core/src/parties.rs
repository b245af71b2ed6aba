//! Data Provider and Data Processor state machines.
//!
//! Both sides are message driven: each inbound byte string (a plaintext
//! control frame during the handshake, a sealed record afterwards) yields
//! zero or more outbound byte strings. The same code runs over TCP and
//! inside the simulator.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    AttestationChallenge, AttestedPeer, ChannelError, Challenger, HandshakeError, ProverIdentity,
    SecureChannel,
};
use crate::crypto::{
    verify_ar, AttestationReport, DirectoryEntry, Endpoint, KeyPair, Nonce, PkiRegistry,
    PublicKey, Signature,
};
use crate::geoclient::{MeasurementRequest, SignedMeasurements};
use crate::geosolve::{
    build_region, check_geofence, region_area_km2, trusted_time, OverheadBudget,
    RegionOutcome, RegionVerdict, DEFAULT_RESOLUTION_KM,
};
use crate::model::{GeoPoint, ModelError, NodeId, Timestamp, UsageConstraints};
use crate::probe::{measure_min_delay, MinDelayRecord, ProbeSettings, Transport};
use crate::wire::{decode_frame, encode_frame, ControlMessage, ErrorMessage};

pub const PROCESSOR_CODE: &[u8] = b"dgate-processor/1";

/// Adjusted GeoClient clocks may disagree by this much before a report is
/// rejected. Measurements are collected one GeoClient after another, so the
/// spread also absorbs the duration of a round.
pub const DEFAULT_TIME_SPREAD_TOLERANCE_S: u64 = 60;

fn signing_view<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_value(value).expect("message types serialise");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("signature");
    }
    serde_json::to_vec(&v).expect("JSON values serialise")
}

/// Nonce of the MR sent to `issuer` in `round`; lets anyone holding the round
/// nonce check that an SM belongs to that round.
pub fn mr_nonce(round: &Nonce, issuer: &NodeId) -> Nonce {
    Nonce::derive(round, issuer.as_bytes())
}

/// Provider-signed subscription token carried in a DR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub consumer: String,
    pub dataset: String,
    pub expires_at: Timestamp,
    pub issuer: PublicKey,
    pub signature: Signature,
}

impl Credential {
    pub fn issue(consumer: &str, dataset: &str, expires_at: Timestamp, key: &KeyPair) -> Self {
        let mut c = Self {
            consumer: consumer.into(),
            dataset: dataset.into(),
            expires_at,
            issuer: key.public(),
            signature: Signature::from_bytes([0; 64]),
        };
        c.signature = key.sign(&signing_view(&c));
        c
    }

    pub fn verify(&self, provider: &PublicKey, now: Timestamp) -> bool {
        self.issuer == *provider && now <= self.expires_at && provider.verify(&signing_view(self), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRequest {
    pub credential: Credential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsMessage {
    pub constraints: UsageConstraints,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataMessage {
    #[serde(with = "crate::wire::b64")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientListEntry {
    pub id: NodeId,
    pub endpoint: Endpoint,
    pub public_key: PublicKey,
    pub location: GeoPoint,
}

/// GeoClients the provider picked for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientList {
    pub session: Nonce,
    pub round: Nonce,
    pub repetitions: u32,
    pub geoclients: Vec<ClientListEntry>,
    pub signature: Signature,
}

impl ClientList {
    pub fn verify(&self, provider: &PublicKey) -> bool {
        provider.verify(&signing_view(self), &self.signature)
    }

    pub fn entry(&self, id: &NodeId) -> Option<&ClientListEntry> {
        self.geoclients.iter().find(|e| e.id == *id)
    }

    /// Directory view of the listed GeoClients, for region building.
    pub fn registry(&self) -> PkiRegistry {
        let mut r = PkiRegistry::default();
        for e in &self.geoclients {
            r.register_geoclient(
                e.id,
                DirectoryEntry { public_key: e.public_key, endpoint: e.endpoint.clone(), location: Some(e.location) },
            );
        }
        r
    }
}

/// A list request from the processor (`list` empty) or the provider's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientListMessage {
    pub session: Nonce,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<ClientList>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeolocationReport {
    pub round: Nonce,
    pub processor: NodeId,
    pub sms: Vec<SignedMeasurements>,
    pub assembled_at: Timestamp,
    /// Fresh platform report over the round nonce; pins the host.
    pub platform_report: AttestationReport,
    pub signature: Signature,
}

impl GeolocationReport {
    pub fn verify(&self, processor_key: &PublicKey) -> bool {
        processor_key.verify(&signing_view(self), &self.signature)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("attestation failed: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("credential invalid")]
    BadCredential,
    #[error("protocol violation: expected {expected}, got {got}")]
    ProtocolViolation { expected: &'static str, got: String },
    #[error("unknown session")]
    UnknownSession,
    #[error("session aborted")]
    SessionAborted,
    #[error("only {available} GeoClients with known locations, {needed} needed")]
    InsufficientGeoClients { available: usize, needed: usize },
    #[error("only {valid} valid measurements, {needed} needed")]
    InsufficientMeasurements { valid: usize, needed: usize },
    #[error("client list rejected: {0}")]
    BadClientList(&'static str),
    #[error("bad signature chain: {0}")]
    BadSignatureChain(String),
    #[error("report platform differs from the attested platform")]
    PlatformMismatch,
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("constraints invalid: {0}")]
    Constraints(#[from] ModelError),
    #[error("peer reported {}: {}", .0.code, .0.detail)]
    Remote(ErrorMessage),
}

impl ProtocolError {
    fn violation(expected: &'static str, got: &ControlMessage) -> Self {
        ProtocolError::ProtocolViolation { expected, got: got.type_name().into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub resolution_km: f64,
    pub spread_tolerance_s: u64,
    /// Geolocation rounds per session; rounds after the first use the
    /// refined list.
    pub rounds: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { resolution_km: DEFAULT_RESOLUTION_KM, spread_tolerance_s: DEFAULT_TIME_SPREAD_TOLERANCE_S, rounds: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderPhase {
    Challenged,
    Attested,
    Serving,
    RoundOpen,
    Reviewed,
    Aborted,
}

/// Provider's independent reading of one GR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub round: Nonce,
    pub outcome: Option<RegionOutcome>,
    pub error: Option<String>,
    pub area_km2: f64,
}

struct ProviderSession {
    phase: ProviderPhase,
    challenger: Option<Challenger>,
    peer: Option<AttestedPeer>,
    current: Option<ClientList>,
    rounds_done: u32,
    reviews: Vec<Review>,
}

pub struct ProviderState {
    pub id: NodeId,
    keypair: KeyPair,
    pub registry: PkiRegistry,
    pub constraints: UsageConstraints,
    payload: Vec<u8>,
    pub config: ProviderConfig,
    issued_nonces: HashSet<Nonce>,
    sessions: BTreeMap<Nonce, ProviderSession>,
    rng: ChaCha20Rng,
}

impl ProviderState {
    pub fn new(
        id: NodeId,
        keypair: KeyPair,
        registry: PkiRegistry,
        constraints: UsageConstraints,
        payload: Vec<u8>,
        config: ProviderConfig,
        rng_seed: [u8; 32],
    ) -> Result<Self, ProtocolError> {
        constraints.validate()?;
        Ok(Self {
            id,
            keypair,
            registry,
            constraints,
            payload,
            config,
            issued_nonces: HashSet::new(),
            sessions: BTreeMap::new(),
            rng: ChaCha20Rng::from_seed(rng_seed),
        })
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public()
    }

    pub fn issue_credential(&self, consumer: &str, dataset: &str, expires_at: Timestamp) -> Credential {
        Credential::issue(consumer, dataset, expires_at, &self.keypair)
    }

    fn fresh_nonce(&mut self) -> Nonce {
        loop {
            let n = Nonce::random(&mut self.rng);
            if self.issued_nonces.insert(n) {
                return n;
            }
        }
    }

    /// Opens a session: the returned challenge goes to the processor host.
    pub fn provider_begin_attestation(&mut self) -> (Nonce, AttestationChallenge) {
        let challenger = Challenger::new(&mut self.rng);
        self.issued_nonces.insert(challenger.nonce());
        let session = challenger.session();
        let ac = challenger.challenge();
        self.sessions.insert(
            session,
            ProviderSession {
                phase: ProviderPhase::Challenged,
                challenger: Some(challenger),
                peer: None,
                current: None,
                rounds_done: 0,
                reviews: Vec::new(),
            },
        );
        (session, ac)
    }

    pub fn phase(&self, session: &Nonce) -> Option<ProviderPhase> {
        self.sessions.get(session).map(|s| s.phase)
    }

    pub fn reviews(&self, session: &Nonce) -> &[Review] {
        self.sessions.get(session).map(|s| s.reviews.as_slice()).unwrap_or(&[])
    }

    pub fn attested_peer(&self, session: &Nonce) -> Option<&AttestedPeer> {
        self.sessions.get(session).and_then(|s| s.peer.as_ref())
    }

    pub fn current_client_list(&self, session: &Nonce) -> Option<&ClientList> {
        self.sessions.get(session).and_then(|s| s.current.as_ref())
    }

    /// Handles one inbound message for `session`. Any error aborts it.
    pub fn on_message(
        &mut self,
        session: Nonce,
        bytes: &[u8],
        now: Timestamp,
    ) -> Result<Vec<Vec<u8>>, ProtocolError> {
        let result = self.dispatch(session, bytes, now);
        if let Err(e) = &result {
            if let Some(s) = self.sessions.get_mut(&session) {
                log::warn!("provider session {:?} aborted: {e}", session);
                s.phase = ProviderPhase::Aborted;
            }
        }
        result
    }

    fn dispatch(&mut self, session: Nonce, bytes: &[u8], now: Timestamp) -> Result<Vec<Vec<u8>>, ProtocolError> {
        let phase = self.sessions.get(&session).ok_or(ProtocolError::UnknownSession)?.phase;
        match phase {
            ProviderPhase::Aborted => Err(ProtocolError::SessionAborted),
            ProviderPhase::Challenged => {
                let (msg, _) = decode_frame(bytes).map_err(ChannelError::from)?;
                let ControlMessage::AR(ar) = msg else {
                    return Err(ProtocolError::violation("AR", &msg));
                };
                let s = self.sessions.get_mut(&session).expect("checked");
                let challenger = s.challenger.take().expect("challenged session has a challenger");
                let peer = challenger.complete(&ar, &self.registry, None)?;
                s.peer = Some(peer);
                s.phase = ProviderPhase::Attested;
                Ok(Vec::new())
            }
            _ => {
                let msg = {
                    let s = self.sessions.get_mut(&session).expect("checked");
                    s.peer.as_mut().expect("attested").channel.open(bytes)?
                };
                let replies = self.handle_sealed(session, phase, msg, now)?;
                let s = self.sessions.get_mut(&session).expect("checked");
                let ch = &mut s.peer.as_mut().expect("attested").channel;
                replies.iter().map(|m| ch.seal(m).map_err(ProtocolError::from)).collect()
            }
        }
    }

    fn handle_sealed(
        &mut self,
        session: Nonce,
        phase: ProviderPhase,
        msg: ControlMessage,
        now: Timestamp,
    ) -> Result<Vec<ControlMessage>, ProtocolError> {
        match (phase, msg) {
            (ProviderPhase::Attested, ControlMessage::DR(dr)) => {
                let (c, d) = self.provider_handle_dr(&dr, now)?;
                self.sessions.get_mut(&session).expect("checked").phase = ProviderPhase::Serving;
                Ok(vec![ControlMessage::Constraints(c), ControlMessage::Data(d)])
            }
            (ProviderPhase::Serving | ProviderPhase::Reviewed, ControlMessage::CL(req)) if req.list.is_none() => {
                let round = self.fresh_nonce();
                let cl = self.select_client_list(session, round)?;
                let s = self.sessions.get_mut(&session).expect("checked");
                s.current = Some(cl.clone());
                s.phase = ProviderPhase::RoundOpen;
                Ok(vec![ControlMessage::CL(ClientListMessage { session, list: Some(cl) })])
            }
            (ProviderPhase::RoundOpen, ControlMessage::GR(gr)) => {
                let review = self.provider_review_gr(session, &gr)?;
                let refined = review.outcome.is_some();
                self.finish_round(session, review, refined.then_some(&gr))
            }
            (ProviderPhase::RoundOpen, ControlMessage::Error(e)) => {
                let round = self.sessions[&session].current.as_ref().map(|c| c.round).expect("round open");
                let review = Review { round, outcome: None, error: Some(format!("{}: {}", e.code, e.detail)), area_km2: 0.0 };
                self.finish_round(session, review, None)
            }
            (ProviderPhase::Attested, m) => Err(ProtocolError::violation("DR", &m)),
            (ProviderPhase::RoundOpen, m) => Err(ProtocolError::violation("GR", &m)),
            (_, m) => Err(ProtocolError::violation("CL request", &m)),
        }
    }

    fn finish_round(
        &mut self,
        session: Nonce,
        review: Review,
        gr: Option<&GeolocationReport>,
    ) -> Result<Vec<ControlMessage>, ProtocolError> {
        let s = self.sessions.get_mut(&session).expect("checked");
        s.reviews.push(review);
        s.rounds_done += 1;
        if s.rounds_done >= self.config.rounds {
            s.phase = ProviderPhase::Reviewed;
            return Ok(Vec::new());
        }
        let round = self.fresh_nonce();
        let cl = match gr {
            Some(gr) => self.refined_client_list(session, round, gr)?,
            None => self.select_client_list(session, round)?,
        };
        let s = self.sessions.get_mut(&session).expect("checked");
        s.current = Some(cl.clone());
        s.phase = ProviderPhase::RoundOpen;
        Ok(vec![ControlMessage::CL(ClientListMessage { session, list: Some(cl) })])
    }

    pub fn provider_handle_dr(
        &self,
        dr: &DataRequest,
        now: Timestamp,
    ) -> Result<(ConstraintsMessage, DataMessage), ProtocolError> {
        if !dr.credential.verify(&self.keypair.public(), now) {
            return Err(ProtocolError::BadCredential);
        }
        Ok((
            ConstraintsMessage { constraints: self.constraints.clone() },
            DataMessage { payload: self.payload.clone() },
        ))
    }

    fn candidates(&self) -> Vec<ClientListEntry> {
        self.registry
            .geoclient_directory
            .iter()
            .filter_map(|(id, e)| {
                e.location.map(|location| ClientListEntry {
                    id: *id,
                    endpoint: e.endpoint.clone(),
                    public_key: e.public_key,
                    location,
                })
            })
            .collect()
    }

    fn sign_list(&self, session: Nonce, round: Nonce, geoclients: Vec<ClientListEntry>) -> ClientList {
        let mut cl = ClientList {
            session,
            round,
            repetitions: self.constraints.repetitions,
            geoclients,
            signature: Signature::from_bytes([0; 64]),
        };
        cl.signature = self.keypair.sign(&signing_view(&cl));
        cl
    }

    /// Uniform random subset of size G, seeded from the provider secret and
    /// the round nonce: unpredictable to the processor, reproducible for audit.
    pub fn select_client_list(&self, session: Nonce, round: Nonce) -> Result<ClientList, ProtocolError> {
        let all = self.candidates();
        let g = self.constraints.min_geoclients;
        if all.len() < g {
            return Err(ProtocolError::InsufficientGeoClients { available: all.len(), needed: g });
        }
        let mut ctx = b"cl".to_vec();
        ctx.extend_from_slice(round.as_bytes());
        let mut rng = ChaCha20Rng::from_seed(self.keypair.derive_seed(&ctx));
        let picked = sample(&mut rng, all.len(), g).into_iter().map(|i| all[i].clone()).collect();
        Ok(self.sign_list(session, round, picked))
    }

    /// The G references with the lowest estimated delay to the processor,
    /// using direct delays and the neighbor excerpts of the last report.
    pub fn refined_client_list(
        &self,
        session: Nonce,
        round: Nonce,
        gr: &GeolocationReport,
    ) -> Result<ClientList, ProtocolError> {
        let all = self.candidates();
        let g = self.constraints.min_geoclients;
        if all.len() < g {
            return Err(ProtocolError::InsufficientGeoClients { available: all.len(), needed: g });
        }
        let mut estimate: BTreeMap<NodeId, u64> = BTreeMap::new();
        for sm in &gr.sms {
            let direct = sm.direct_min_delay.min_rtt.0;
            let e = estimate.entry(sm.issuer).or_insert(u64::MAX);
            *e = (*e).min(direct);
            for n in &sm.neighbor_excerpt {
                let e = estimate.entry(n.peer).or_insert(u64::MAX);
                *e = (*e).min(direct.saturating_add(n.min_rtt.0));
            }
        }
        let mut ranked = all;
        ranked.sort_by_key(|e| (estimate.get(&e.id).copied().unwrap_or(u64::MAX), e.id));
        ranked.truncate(g);
        Ok(self.sign_list(session, round, ranked))
    }

    /// Checks the GR's signature chain against this session and round, then
    /// recomputes the region verdict independently. Audit only.
    pub fn provider_review_gr(&self, session: Nonce, gr: &GeolocationReport) -> Result<Review, ProtocolError> {
        let s = self.sessions.get(&session).ok_or(ProtocolError::UnknownSession)?;
        let peer = s.peer.as_ref().ok_or(ProtocolError::UnknownSession)?;
        let cl = s.current.as_ref().ok_or(ProtocolError::BadSignatureChain("no open round".into()))?;
        if !gr.verify(&peer.identity_key) {
            return Err(ProtocolError::BadSignatureChain("processor signature".into()));
        }
        if gr.round != cl.round {
            return Err(ProtocolError::BadSignatureChain("report belongs to another round".into()));
        }
        let pr = &gr.platform_report;
        if verify_ar(pr, &gr.round, &self.registry).into_result().is_err()
            || pr.key_binding != peer.identity_key
            || pr.platform_key != peer.platform_key
        {
            return Err(ProtocolError::PlatformMismatch);
        }
        for sm in &gr.sms {
            let entry = cl
                .entry(&sm.issuer)
                .ok_or_else(|| ProtocolError::BadSignatureChain(format!("{} not in this round's list", sm.issuer)))?;
            if !sm.verify(&entry.public_key) {
                return Err(ProtocolError::BadSignatureChain(format!("SM from {} does not verify", sm.issuer)));
            }
            if sm.nonce != mr_nonce(&gr.round, &sm.issuer) {
                return Err(ProtocolError::BadSignatureChain(format!("SM from {} has a foreign nonce", sm.issuer)));
            }
        }
        let solved = build_region(&gr.sms, &cl.registry(), OverheadBudget::default()).and_then(|region| {
            let v = check_geofence(&region, &self.constraints.geofence, self.config.resolution_km)?;
            Ok((v.outcome, region_area_km2(&region, self.config.resolution_km)))
        });
        Ok(match solved {
            Ok((outcome, area_km2)) => Review { round: gr.round, outcome: Some(outcome), error: None, area_km2 },
            Err(e) => Review { round: gr.round, outcome: None, error: Some(e.to_string()), area_km2: 0.0 },
        })
    }
}

/// Receives outputs that passed the release gate.
pub trait ReleaseSink {
    fn release(&mut self, output: &[u8]);
}

impl ReleaseSink for Vec<Vec<u8>> {
    fn release(&mut self, output: &[u8]) {
        self.push(output.to_vec());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenyReason {
    NoReport,
    StaleReport,
    OutsideTimeWindow,
    RegionNotProven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReleaseDecision {
    Allow,
    Deny(DenyReason),
}

impl fmt::Display for ReleaseDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReleaseDecision::Allow => f.write_str("Allow"),
            ReleaseDecision::Deny(r) => write!(f, "Deny({r:?})"),
        }
    }
}

/// One-directional request/response link to a GeoClient control port.
pub trait RequestLink {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, String>;
}

/// Opens links to listed GeoClients and resolves their probe endpoints.
pub trait GeoClientConnector<A> {
    fn connect(&mut self, entry: &ClientListEntry) -> Result<Box<dyn RequestLink + '_>, String>;
    fn probe_addr(&self, entry: &ClientListEntry) -> Option<A>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClientFailure {
    Connect(String),
    Handshake(String),
    Remote { code: String, detail: String },
    Channel(String),
    Unexpected(String),
    WrongIssuer,
    NonceMismatch,
    BadSignature,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: Option<Nonce>,
    pub accepted: Vec<NodeId>,
    pub failures: Vec<(NodeId, ClientFailure)>,
    /// The processor's own measurements; never used for the verdict.
    pub advisory: Vec<MinDelayRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessorConfig {
    /// Endpoint GeoClients ping; an address in real mode, a node name in the simulator.
    pub probe_endpoint: String,
    pub timeout_ms: u64,
    /// Answer GeoClient counter challenges with our own report.
    pub mutual_attestation: bool,
    /// Also measure each GeoClient from this side.
    pub advisory_probe: bool,
    pub resolution_km: f64,
    pub spread_tolerance_s: u64,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        Self {
            probe_endpoint: String::new(),
            timeout_ms: 250,
            mutual_attestation: false,
            advisory_probe: true,
            resolution_km: DEFAULT_RESOLUTION_KM,
            spread_tolerance_s: DEFAULT_TIME_SPREAD_TOLERANCE_S,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessorPhase {
    AwaitingChallenge,
    Attested,
    ConstraintsReceived,
    DataReceived,
    Aborted,
}

/// What the release gate saw the last time it ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub decision: ReleaseDecision,
    pub trusted_time: Option<Timestamp>,
    pub verdict: Option<RegionVerdict>,
    pub error: Option<String>,
}

pub struct ProcessorState {
    identity: ProverIdentity,
    /// Trust anchors for GeoClient attestation.
    pub registry: PkiRegistry,
    provider_key: PublicKey,
    credential: Credential,
    pub config: ProcessorConfig,
    phase: ProcessorPhase,
    channel: Option<SecureChannel>,
    session: Option<Nonce>,
    constraints: Option<UsageConstraints>,
    payload: Option<Vec<u8>>,
    pending: VecDeque<Vec<u8>>,
    last_gr: Option<(GeolocationReport, ClientList)>,
    last_round: Option<RoundReport>,
    last_gate: Option<GateRecord>,
    rng: ChaCha20Rng,
}

impl ProcessorState {
    pub fn new(
        identity: ProverIdentity,
        registry: PkiRegistry,
        provider_key: PublicKey,
        credential: Credential,
        config: ProcessorConfig,
        rng_seed: [u8; 32],
    ) -> Self {
        Self {
            identity,
            registry,
            provider_key,
            credential,
            config,
            phase: ProcessorPhase::AwaitingChallenge,
            channel: None,
            session: None,
            constraints: None,
            payload: None,
            pending: VecDeque::new(),
            last_gr: None,
            last_round: None,
            last_gate: None,
            rng: ChaCha20Rng::from_seed(rng_seed),
        }
    }

    pub fn id(&self) -> NodeId {
        self.identity.id
    }

    pub fn phase(&self) -> ProcessorPhase {
        self.phase
    }

    pub fn attested(&self) -> bool {
        self.channel.is_some()
    }

    pub fn constraints(&self) -> Option<&UsageConstraints> {
        self.constraints.as_ref()
    }

    pub fn last_report(&self) -> Option<&GeolocationReport> {
        self.last_gr.as_ref().map(|(g, _)| g)
    }

    pub fn last_round(&self) -> Option<&RoundReport> {
        self.last_round.as_ref()
    }

    pub fn last_gate(&self) -> Option<&GateRecord> {
        self.last_gate.as_ref()
    }

    pub fn pending_outputs(&self) -> usize {
        self.pending.len()
    }

    /// Moves the enclave to another host; later reports carry the new platform key.
    pub fn migrate_platform(&mut self, platform: KeyPair) {
        self.identity.platform = platform;
    }

    /// Computes an output from the payload and queues it behind the gate.
    pub fn queue_output(&mut self, f: impl FnOnce(&[u8]) -> Vec<u8>) -> Result<(), ProtocolError> {
        let payload = self.payload.as_deref().ok_or(ProtocolError::ProtocolViolation {
            expected: "Data",
            got: "output request".into(),
        })?;
        self.pending.push_back(f(payload));
        Ok(())
    }

    /// Handles one inbound message from the provider side.
    pub fn on_message<T, C>(
        &mut self,
        bytes: &[u8],
        transport: &mut T,
        connector: &mut C,
    ) -> Result<Vec<Vec<u8>>, ProtocolError>
    where
        T: Transport,
        C: GeoClientConnector<T::Addr>,
    {
        let result = self.dispatch(bytes, transport, connector);
        if result.is_err() {
            self.phase = ProcessorPhase::Aborted;
        }
        result
    }

    fn dispatch<T, C>(
        &mut self,
        bytes: &[u8],
        transport: &mut T,
        connector: &mut C,
    ) -> Result<Vec<Vec<u8>>, ProtocolError>
    where
        T: Transport,
        C: GeoClientConnector<T::Addr>,
    {
        if self.phase == ProcessorPhase::Aborted {
            return Err(ProtocolError::SessionAborted);
        }
        let Some(channel) = self.channel.as_mut() else {
            let (msg, _) = decode_frame(bytes).map_err(ChannelError::from)?;
            let ControlMessage::AC(ac) = msg else {
                return Err(ProtocolError::violation("AC", &msg));
            };
            let (ar, mut channel) = self.identity.respond(&ac, None, &mut self.rng);
            let dr = channel.seal(&ControlMessage::DR(DataRequest { credential: self.credential.clone() }))?;
            self.channel = Some(channel);
            self.session = Some(ac.session);
            self.phase = ProcessorPhase::Attested;
            return Ok(vec![encode_frame(&ControlMessage::AR(ar)).map_err(ChannelError::from)?, dr]);
        };
        let msg = channel.open(bytes)?;
        let replies = match (self.phase, msg) {
            (ProcessorPhase::Attested, ControlMessage::Constraints(c)) => {
                c.constraints.validate()?;
                self.constraints = Some(c.constraints);
                self.phase = ProcessorPhase::ConstraintsReceived;
                Vec::new()
            }
            (ProcessorPhase::ConstraintsReceived, ControlMessage::Data(d)) => {
                self.payload = Some(d.payload);
                self.phase = ProcessorPhase::DataReceived;
                vec![ControlMessage::CL(ClientListMessage { session: self.session.expect("set"), list: None })]
            }
            (ProcessorPhase::DataReceived, ControlMessage::CL(ClientListMessage { list: Some(cl), .. })) => {
                match self.processor_geolocation_attestation(&cl, transport, connector) {
                    Ok(gr) => vec![ControlMessage::GR(gr)],
                    Err(e @ ProtocolError::InsufficientMeasurements { .. }) => {
                        vec![ControlMessage::Error(ErrorMessage { code: "InsufficientMeasurements".into(), detail: e.to_string() })]
                    }
                    Err(e) => return Err(e),
                }
            }
            (ProcessorPhase::Attested, m) => return Err(ProtocolError::violation("Constraints", &m)),
            (ProcessorPhase::ConstraintsReceived, m) => return Err(ProtocolError::violation("Data", &m)),
            (_, m) => return Err(ProtocolError::violation("CL", &m)),
        };
        let channel = self.channel.as_mut().expect("attested");
        replies.iter().map(|m| channel.seal(m).map_err(ProtocolError::from)).collect()
    }

    /// Runs one geolocation round against the listed GeoClients and signs
    /// the resulting report. Per-client failures are collected in
    /// [`RoundReport`]; the round fails only below `min_geoclients`.
    pub fn processor_geolocation_attestation<T, C>(
        &mut self,
        cl: &ClientList,
        transport: &mut T,
        connector: &mut C,
    ) -> Result<GeolocationReport, ProtocolError>
    where
        T: Transport,
        C: GeoClientConnector<T::Addr>,
    {
        if !cl.verify(&self.provider_key) {
            return Err(ProtocolError::BadClientList("signature"));
        }
        if Some(cl.session) != self.session {
            return Err(ProtocolError::BadClientList("session"));
        }
        let constraints = self.constraints.clone().ok_or(ProtocolError::ProtocolViolation {
            expected: "Constraints",
            got: "CL".into(),
        })?;
        if cl.geoclients.len() < constraints.min_geoclients {
            return Err(ProtocolError::BadClientList("too few GeoClients"));
        }
        let mut report = RoundReport { round: Some(cl.round), ..Default::default() };
        let mut sms = Vec::new();
        for entry in &cl.geoclients {
            match self.measure_one(cl, entry, transport, connector, &mut report) {
                Ok(sm) => {
                    report.accepted.push(entry.id);
                    sms.push(sm);
                }
                Err(f) => {
                    log::warn!("GeoClient {} failed: {:?}", entry.id, f);
                    report.failures.push((entry.id, f));
                }
            }
        }
        let valid = sms.len();
        self.last_round = Some(report);
        if valid < constraints.min_geoclients {
            return Err(ProtocolError::InsufficientMeasurements { valid, needed: constraints.min_geoclients });
        }
        let mut gr = GeolocationReport {
            round: cl.round,
            processor: self.identity.id,
            sms,
            assembled_at: crate::model::to_micros(transport.utc_now()),
            platform_report: self.identity.report(cl.round),
            signature: Signature::from_bytes([0; 64]),
        };
        gr.signature = self.identity.identity.sign(&signing_view(&gr));
        self.last_gr = Some((gr.clone(), cl.clone()));
        Ok(gr)
    }

    fn measure_one<T, C>(
        &mut self,
        cl: &ClientList,
        entry: &ClientListEntry,
        transport: &mut T,
        connector: &mut C,
        report: &mut RoundReport,
    ) -> Result<SignedMeasurements, ClientFailure>
    where
        T: Transport,
        C: GeoClientConnector<T::Addr>,
    {
        let probe_addr = if self.config.advisory_probe { connector.probe_addr(entry) } else { None };
        let challenger = Challenger::new(&mut self.rng);
        let ac = encode_frame(&ControlMessage::AC(challenger.challenge())).expect("small frame");
        let mut peer = {
            let mut link = connector.connect(entry).map_err(ClientFailure::Connect)?;
            let reply = link.round_trip(&ac).map_err(ClientFailure::Connect)?;
            let (msg, _) = decode_frame(&reply).map_err(|e| ClientFailure::Channel(e.to_string()))?;
            let ar = match msg {
                ControlMessage::AR(ar) => ar,
                ControlMessage::Error(e) => return Err(ClientFailure::Remote { code: e.code, detail: e.detail }),
                other => return Err(ClientFailure::Unexpected(other.type_name().into())),
            };
            let peer = challenger
                .complete(&ar, &self.registry, Some(&entry.public_key))
                .map_err(|e| ClientFailure::Handshake(e.to_string()))?;
            (peer, link)
        };

        if let Some(addr) = probe_addr {
            let settings = ProbeSettings::new(cl.repetitions, Duration::from_millis(self.config.timeout_ms));
            let session = Nonce::derive(&cl.round, &[b"advisory".as_slice(), entry.id.as_bytes()].concat());
            match measure_min_delay(transport, &addr, entry.id, &settings, *session.as_bytes()) {
                Ok(r) => report.advisory.push(r),
                Err(e) => log::info!("advisory probe to {} failed: {e}", entry.id),
            }
        }

        let nonce = mr_nonce(&cl.round, &entry.id);
        let requester_report = if self.config.mutual_attestation {
            peer.0.counter_challenge.map(|c| self.identity.report(c))
        } else {
            None
        };
        let mr = ControlMessage::MR(MeasurementRequest {
            round: cl.round,
            nonce,
            repetitions: cl.repetitions,
            timeout_ms: self.config.timeout_ms,
            requester: self.identity.id,
            requester_probe: self.config.probe_endpoint.clone(),
            requester_report,
        });
        let sealed = peer.0.channel.seal(&mr).map_err(|e| ClientFailure::Channel(e.to_string()))?;
        let reply = peer.1.round_trip(&sealed).map_err(ClientFailure::Connect)?;
        let sm = match peer.0.channel.open(&reply).map_err(|e| ClientFailure::Channel(e.to_string()))? {
            ControlMessage::SM(sm) => sm,
            ControlMessage::Error(e) => return Err(ClientFailure::Remote { code: e.code, detail: e.detail }),
            other => return Err(ClientFailure::Unexpected(other.type_name().into())),
        };
        if sm.issuer != entry.id {
            return Err(ClientFailure::WrongIssuer);
        }
        if sm.nonce != nonce {
            return Err(ClientFailure::NonceMismatch);
        }
        if !sm.verify(&entry.public_key) {
            return Err(ClientFailure::BadSignature);
        }
        Ok(sm)
    }

    /// Allows release only for a fresh report whose trusted time lies in the
    /// window and whose region is proven inside the fence. Queued outputs
    /// are flushed to `sink` on Allow.
    pub fn release_gate(&mut self, now: Timestamp, sink: &mut dyn ReleaseSink) -> ReleaseDecision {
        let record = self.evaluate_gate(now);
        let decision = record.decision;
        if decision == ReleaseDecision::Allow {
            while let Some(out) = self.pending.pop_front() {
                sink.release(&out);
            }
        }
        self.last_gate = Some(record);
        decision
    }

    fn evaluate_gate(&self, now: Timestamp) -> GateRecord {
        let deny = |r, error: Option<String>| GateRecord {
            decision: ReleaseDecision::Deny(r),
            trusted_time: None,
            verdict: None,
            error,
        };
        let (Some(constraints), Some((gr, cl))) = (&self.constraints, &self.last_gr) else {
            return deny(DenyReason::NoReport, None);
        };
        if now - gr.assembled_at > constraints.max_report_age() {
            return deny(DenyReason::StaleReport, None);
        }
        let tolerance = chrono::Duration::seconds(self.config.spread_tolerance_s as i64);
        let t = match trusted_time(&gr.sms, tolerance) {
            Ok(t) => t,
            Err(e) => return deny(DenyReason::OutsideTimeWindow, Some(e.to_string())),
        };
        if !constraints.time_window.contains(t) {
            return GateRecord { trusted_time: Some(t), ..deny(DenyReason::OutsideTimeWindow, None) };
        }
        let verdict = build_region(&gr.sms, &cl.registry(), OverheadBudget::default())
            .and_then(|region| check_geofence(&region, &constraints.geofence, self.config.resolution_km));
        match verdict {
            Ok(v) if v.outcome == RegionOutcome::ProvenInside => GateRecord {
                decision: ReleaseDecision::Allow,
                trusted_time: Some(t),
                verdict: Some(v),
                error: None,
            },
            Ok(v) => GateRecord {
                trusted_time: Some(t),
                verdict: Some(v),
                ..deny(DenyReason::RegionNotProven, None)
            },
            Err(e) => GateRecord {
                trusted_time: Some(t),
                ..deny(DenyReason::RegionNotProven, Some(e.to_string()))
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyPolicy {
    pub drop_probability: f64,
    /// Answer every challenge after the first with the first AR seen.
    pub replay_ar: bool,
    /// Flip one bit in every forwarded sealed record.
    pub tamper_records: bool,
}

/// The processor's host OS: forwards every message and may misbehave.
pub struct UntrustedOs {
    policy: ProxyPolicy,
    captured_ar: Option<Vec<u8>>,
    rng: ChaCha20Rng,
    pub forwarded: u64,
    pub dropped: u64,
}

impl UntrustedOs {
    pub fn new(policy: ProxyPolicy, seed: u64) -> Self {
        Self { policy, captured_ar: None, rng: ChaCha20Rng::seed_from_u64(seed), forwarded: 0, dropped: 0 }
    }

    pub fn forward(&mut self, bytes: Vec<u8>) -> Option<Vec<u8>> {
        if self.policy.drop_probability > 0.0 && rand::Rng::gen_bool(&mut self.rng, self.policy.drop_probability.min(1.0)) {
            self.dropped += 1;
            return None;
        }
        self.forwarded += 1;
        let is_ar = matches!(decode_frame(&bytes), Ok((ControlMessage::AR(_), _)));
        if is_ar {
            if self.policy.replay_ar {
                match &self.captured_ar {
                    Some(old) => return Some(old.clone()),
                    None => self.captured_ar = Some(bytes.clone()),
                }
            }
            return Some(bytes);
        }
        let is_frame = decode_frame(&bytes).is_ok();
        if self.policy.tamper_records && !is_frame {
            let mut b = bytes;
            if let Some(last) = b.last_mut() {
                *last ^= 0x01;
            }
            return Some(b);
        }
        Some(bytes)
    }
}
