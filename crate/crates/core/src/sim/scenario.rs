//! Scenario files and the driver that runs a provider, an attested
//! processor behind an untrusted OS, and a GeoClient mesh in virtual time.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Duration;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{HandshakeError, ProverIdentity};
use crate::crypto::{DirectoryEntry, Endpoint, KeyPair, PkiRegistry, TeeKind};
use crate::geoclient::{
    GeoClient, GeoClientConfig, GeoClientConnection, SmFault, GEOCLIENT_CODE,
};
use crate::geosolve::{write_region_csv, KM_PER_RTT_MICROSECOND};
use crate::model::{haversine_km, Geofence, GeoPoint, NodeId, TimeWindow, Timestamp, UsageConstraints};
use crate::parties::{
    ClientFailure, ClientListEntry, GeoClientConnector, ProcessorConfig, ProcessorState, ProtocolError,
    ProviderConfig, ProviderState, ProxyPolicy, ReleaseDecision, RequestLink, Review, UntrustedOs,
    PROCESSOR_CODE,
};
use crate::probe::ProbeSettings;
use crate::sim::network::{AdversaryPolicy, NetStats, SimNetwork, SimNode, SimTransport, TopologyConfig};
use crate::sim::overhead::{OverheadKind, OverheadModel};
use crate::sim::SimError;

/// Scenario files shipped with the library, by name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("honest_inside", include_str!("../../../../scenarios/honest_inside.toml")),
    ("relocated_outside", include_str!("../../../../scenarios/relocated_outside.toml")),
    ("expired_window", include_str!("../../../../scenarios/expired_window.toml")),
    ("stale_gr", include_str!("../../../../scenarios/stale_gr.toml")),
    ("tampered_sm", include_str!("../../../../scenarios/tampered_sm.toml")),
    ("replayed_ar", include_str!("../../../../scenarios/replayed_ar.toml")),
];

pub fn bundled_scenario(name: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Processor,
    GeoClient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub role: Role,
    #[serde(default = "default_tee")]
    pub tee: TeeKind,
    /// Defaults to the profile matching `tee`.
    #[serde(default)]
    pub overhead: Option<OverheadKind>,
    #[serde(default)]
    pub clock_skew_s: i64,
    #[serde(default)]
    pub fault: Option<SmFault>,
}

fn default_tee() -> TeeKind {
    TeeKind::SgxLike
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub timeout_ms: u64,
    pub sweep_repetitions: u32,
    pub warmup_sweeps: u32,
    pub sweep_period_s: u64,
    pub mutual_attestation: bool,
    pub advisory_probe: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            timeout_ms: 250,
            sweep_repetitions: 200,
            warmup_sweeps: 2,
            sweep_period_s: 60,
            mutual_attestation: false,
            advisory_probe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub min_geoclients: usize,
    pub repetitions: u32,
    pub max_report_age_s: u64,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
    /// Polygon vertices as `[lat, lon]` pairs.
    pub fence: Vec<[f64; 2]>,
}

impl ConstraintsSection {
    pub fn to_constraints(&self) -> Result<UsageConstraints, SimError> {
        let vertices = self.fence.iter().map(|[lat, lon]| GeoPoint::new(*lat, *lon)).collect::<Result<_, _>>()?;
        let c = UsageConstraints {
            geofence: Geofence::new(vertices)?,
            time_window: TimeWindow::new(self.not_before, self.not_after)?,
            min_geoclients: self.min_geoclients,
            repetitions: self.repetitions,
            max_report_age_s: self.max_report_age_s,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    /// Extra one-way delay on every packet to or from the processor host.
    pub processor_link_delay_us: u64,
    pub drop_probability: f64,
    pub jitter_us: u64,
    /// The untrusted OS answers later challenges with the first AR it saw.
    pub replay_ar: bool,
    /// The untrusted OS flips a bit in every sealed record it forwards.
    pub tamper_records: bool,
    pub proxy_drop_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub after_round: u32,
    pub relocate: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub start_time: Timestamp,
    #[serde(default = "one")]
    pub sessions: u32,
    #[serde(default = "one")]
    pub rounds: u32,
    /// Virtual time between a report and the release attempt.
    #[serde(default = "default_release_delay")]
    pub release_delay_s: u64,
    #[serde(default)]
    pub network: TopologyConfig,
    #[serde(default)]
    pub probe: ProbeSection,
    pub constraints: ConstraintsSection,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub adversary: AdversarySection,
    #[serde(default)]
    pub events: Vec<EventConfig>,
}

fn one() -> u32 {
    1
}

fn default_release_delay() -> u64 {
    5
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let processors = self.nodes.iter().filter(|n| n.role == Role::Processor).count();
        if processors != 1 {
            return Err(SimError::Config(format!("need exactly one processor node, found {processors}")));
        }
        let mut names = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(&n.name) {
                return Err(SimError::Config(format!("duplicate node name {:?}", n.name)));
            }
            GeoPoint::new(n.lat, n.lon)?;
        }
        for e in &self.events {
            if !names.contains(&e.relocate) {
                return Err(SimError::Config(format!("event relocates unknown node {:?}", e.relocate)));
            }
            GeoPoint::new(e.lat, e.lon)?;
        }
        if self.rounds == 0 || self.sessions == 0 {
            return Err(SimError::Config("rounds and sessions must be at least 1".into()));
        }
        if self.probe.sweep_repetitions == 0 || self.probe.timeout_ms == 0 {
            return Err(SimError::Config("probe repetitions and timeout must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adversary.drop_probability)
            || !(0.0..=1.0).contains(&self.adversary.proxy_drop_probability)
        {
            return Err(SimError::Config("drop probabilities must lie in [0, 1]".into()));
        }
        self.constraints.to_constraints()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub round: u32,
    pub src: String,
    pub dst: String,
    pub repetitions: u32,
    pub min_rtt_us: u64,
    pub distance_km: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRow {
    pub at: Timestamp,
    pub observer: String,
    pub subject: String,
    pub severity_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub session: u32,
    pub round: u32,
    pub decision: ReleaseDecision,
    pub outcome: Option<String>,
    pub area_km2: Option<f64>,
    pub trusted_time: Option<Timestamp>,
    /// Where the processor actually was.
    pub processor_at: GeoPoint,
    /// Whether the true location lies in the computed region.
    pub truth_in_region: Option<bool>,
    pub accepted: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub gate_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session: u32,
    pub aborted: Option<String>,
    pub reviews: Vec<Review>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub seed: u64,
    pub rounds: Vec<RoundResult>,
    pub sessions: Vec<SessionResult>,
    pub measurements: Vec<MeasurementRow>,
    pub alerts: Vec<AlertRow>,
    pub released: Vec<String>,
    pub network: NetStats,
    #[serde(skip)]
    region: Option<(crate::model::FeasibleRegion, f64)>,
}

impl ScenarioResult {
    /// Outcome of the last session: `Allow`, `Deny(reason)` or `Aborted(reason)`.
    pub fn verdict(&self) -> String {
        if let Some(reason) = self.sessions.last().and_then(|s| s.aborted.clone()) {
            return format!("Aborted({reason})");
        }
        match self.rounds.last() {
            Some(r) => r.decision.to_string(),
            None => "Deny(NoReport)".into(),
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario={} seed={}", self.name, self.seed);
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "session={} round={} decision={} outcome={} area_km2={:.0} accepted={} failures={}",
                r.session,
                r.round,
                r.decision,
                r.outcome.as_deref().unwrap_or("-"),
                r.area_km2.unwrap_or(0.0),
                r.accepted.len(),
                r.failures.len()
            );
        }
        for sess in &self.sessions {
            if let Some(a) = &sess.aborted {
                let _ = writeln!(s, "session={} aborted={a}", sess.session);
            }
        }
        let _ = writeln!(
            s,
            "alerts={} released={} round_trips={} light_floor_violations={}",
            self.alerts.len(),
            self.released.len(),
            self.network.round_trips,
            self.network.violations
        );
        let _ = writeln!(s, "verdict={}", self.verdict());
        s
    }

    /// Writes measurements.csv, region.csv, alerts.csv, result.json and summary.txt.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("measurements.csv"))?;
        for row in &self.measurements {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("alerts.csv"))?;
        w.write_record(["at", "observer", "subject", "severity_km"])?;
        for a in &self.alerts {
            w.write_record([
                a.at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
                a.observer.clone(),
                a.subject.clone(),
                format!("{:.3}", a.severity_km),
            ])?;
        }
        w.flush()?;
        let region = fs::File::create(dir.join("region.csv"))?;
        match &self.region {
            Some((r, res)) => write_region_csv(r, *res, region)?,
            None => csv::Writer::from_writer(region).write_record(["kind", "lat", "lon", "radius_km"])?,
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| SimError::Io(e.into()))?;
        fs::write(dir.join("result.json"), json)?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

fn seeded(seed: u64, label: &str) -> [u8; 32] {
    Sha256::new().chain_update(seed.to_be_bytes()).chain_update(label.as_bytes()).finalize().into()
}

fn prover(seed: u64, node: &NodeConfig, code: &[u8]) -> ProverIdentity {
    ProverIdentity {
        id: NodeId::from_name(&node.name),
        identity: KeyPair::from_seed(seeded(seed, &format!("identity/{}", node.name))),
        platform: KeyPair::from_seed(seeded(seed, &format!("platform/{}", node.name))),
        code_identity: code.to_vec(),
        tee_kind: node.tee,
    }
}

/// Control links in the simulator are in-process calls; only pings take
/// virtual time.
pub struct SimConnector<'a> {
    pub net: &'a SimNetwork,
    pub geoclients: &'a BTreeMap<NodeId, GeoClient>,
    pub rng: &'a mut ChaCha20Rng,
}

struct SimLink<'a> {
    gc: &'a GeoClient,
    conn: GeoClientConnection,
    transport: SimTransport,
    rng: &'a mut ChaCha20Rng,
}

impl RequestLink for SimLink<'_> {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, String> {
        let resolve = |s: &str| Some(NodeId::from_name(s));
        Ok(self.conn.handle(self.gc, request, &mut self.transport, resolve, &mut *self.rng))
    }
}

impl GeoClientConnector<NodeId> for SimConnector<'_> {
    fn connect(&mut self, entry: &ClientListEntry) -> Result<Box<dyn RequestLink + '_>, String> {
        let gc = self.geoclients.get(&entry.id).ok_or_else(|| format!("no route to {}", entry.id))?;
        Ok(Box::new(SimLink {
            gc,
            conn: GeoClientConnection::new(),
            transport: self.net.transport(entry.id),
            rng: &mut *self.rng,
        }))
    }

    fn probe_addr(&self, entry: &ClientListEntry) -> Option<NodeId> {
        Some(entry.id)
    }
}

fn error_tag(e: &ProtocolError) -> String {
    match e {
        ProtocolError::Handshake(HandshakeError::Rejected(r)) => format!("{r:?}"),
        ProtocolError::Handshake(h) => format!("{h:?}"),
        ProtocolError::Remote(m) => m.code.clone(),
        other => {
            let dbg = format!("{other:?}");
            dbg.split(['(', ' ', '{']).next().unwrap_or("Error").to_string()
        }
    }
}

fn failure_tag(f: &ClientFailure) -> String {
    match f {
        ClientFailure::Remote { code, .. } => code.clone(),
        other => format!("{other:?}").split(['(', ' ', '{']).next().unwrap_or("Error").to_string(),
    }
}

struct Mesh {
    cfg: ScenarioConfig,
    net: SimNetwork,
    names: BTreeMap<NodeId, String>,
    geoclients: BTreeMap<NodeId, GeoClient>,
    sweep_settings: ProbeSettings,
    last_sweep: Option<u64>,
    alerts: Vec<crate::sim::scenario::AlertRow>,
}

impl Mesh {
    fn name(&self, id: &NodeId) -> String {
        self.names.get(id).cloned().unwrap_or_else(|| id.to_string())
    }

    fn sweep(&mut self) {
        let peers: Vec<(NodeId, NodeId)> = self.geoclients.keys().map(|id| (*id, *id)).collect();
        for (id, gc) in &self.geoclients {
            let mut t = self.net.transport(*id);
            let report = gc.periodic_neighbor_sweep(&mut t, &peers, &self.sweep_settings);
            for a in report.alerts {
                self.alerts.push(AlertRow {
                    at: self.net.utc_now(),
                    observer: self.names[id].clone(),
                    subject: self.names.get(&a.subject).cloned().unwrap_or_else(|| a.subject.to_string()),
                    severity_km: a.severity_km,
                });
            }
        }
        self.last_sweep = Some(self.net.now_micros());
    }

    fn sweep_if_due(&mut self) {
        let period = self.cfg.probe.sweep_period_s * 1_000_000;
        if self.last_sweep.is_none_or(|t| self.net.now_micros() >= t + period) {
            self.sweep();
        }
    }
}

/// Runs a scenario to completion. Same configuration, same result.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult, SimError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let constraints = cfg.constraints.to_constraints()?;
    let net = SimNetwork::new(cfg.network, seed, cfg.start_time)?;

    let mut registry = PkiRegistry::default();
    registry.allow_code(GEOCLIENT_CODE);
    registry.allow_code(PROCESSOR_CODE);
    let mut gc_registry = registry.clone();
    let mut names = BTreeMap::new();
    let mut proc_node = None;
    for node in &cfg.nodes {
        let id = NodeId::from_name(&node.name);
        names.insert(id, node.name.clone());
        let location = GeoPoint::new(node.lat, node.lon)?;
        let overhead = OverheadModel::of(node.overhead.unwrap_or(OverheadKind::for_tee(node.tee)));
        net.add_node(SimNode { id, location, overhead, auto_respond: true })?;
        let code = if node.role == Role::Processor { PROCESSOR_CODE } else { GEOCLIENT_CODE };
        let p = prover(seed, node, code);
        registry.trust_platform(p.platform.public());
        gc_registry.trust_platform(p.platform.public());
        match node.role {
            Role::Processor => proc_node = Some((node.clone(), p)),
            Role::GeoClient => registry.register_geoclient(
                id,
                DirectoryEntry {
                    public_key: p.identity.public(),
                    endpoint: Endpoint { probe: node.name.clone(), control: node.name.clone() },
                    location: Some(location),
                },
            ),
        }
    }
    let (proc_cfg, proc_identity) = proc_node.expect("validated");
    let proc_id = proc_identity.id;

    let gc_config = GeoClientConfig {
        sweep_period: Duration::from_secs(cfg.probe.sweep_period_s),
        require_mutual_attestation: cfg.probe.mutual_attestation,
        ..GeoClientConfig::default()
    };
    let mut geoclients = BTreeMap::new();
    for node in cfg.nodes.iter().filter(|n| n.role == Role::GeoClient) {
        let gc = GeoClient::new(prover(seed, node, GEOCLIENT_CODE), gc_config.clone(), gc_registry.clone());
        gc.set_clock_offset(chrono::Duration::seconds(node.clock_skew_s));
        gc.set_fault(node.fault);
        geoclients.insert(gc.id(), gc);
    }

    let mut adversary = AdversaryPolicy {
        jitter_us: cfg.adversary.jitter_us,
        drop_probability: cfg.adversary.drop_probability,
        ..AdversaryPolicy::default()
    };
    if cfg.adversary.processor_link_delay_us > 0 {
        adversary.node_delay.insert(proc_id, cfg.adversary.processor_link_delay_us);
    }
    net.set_adversary(adversary);

    let mut mesh = Mesh {
        cfg: cfg.clone(),
        net: net.clone(),
        names,
        geoclients,
        sweep_settings: ProbeSettings::new(cfg.probe.sweep_repetitions, Duration::from_millis(cfg.probe.timeout_ms)),
        last_sweep: None,
        alerts: Vec::new(),
    };
    for _ in 0..cfg.probe.warmup_sweeps {
        mesh.sweep();
    }

    let provider_key = KeyPair::from_seed(seeded(seed, "provider"));
    let mut provider = ProviderState::new(
        NodeId::from_name("provider"),
        provider_key,
        registry,
        constraints,
        format!("dataset for {}", cfg.name).into_bytes(),
        ProviderConfig { rounds: cfg.rounds, ..ProviderConfig::default() },
        seeded(seed, "provider-rng"),
    )?;
    let credential = provider.issue_credential("consumer", "dataset", cfg.start_time + chrono::Duration::days(1));
    let mut proxy = UntrustedOs::new(
        ProxyPolicy {
            drop_probability: cfg.adversary.proxy_drop_probability,
            replay_ar: cfg.adversary.replay_ar,
            tamper_records: cfg.adversary.tamper_records,
        },
        seed,
    );
    let mut link_rng = ChaCha20Rng::from_seed(seeded(seed, "links"));
    let mut sink: Vec<Vec<u8>> = Vec::new();
    let mut rounds = Vec::new();
    let mut sessions = Vec::new();
    let mut measurements = Vec::new();
    let mut region = None;
    let mut round_index = 0u32;

    for s in 0..cfg.sessions {
        let mut processor = ProcessorState::new(
            proc_identity.clone(),
            gc_registry.clone(),
            provider.public_key(),
            credential.clone(),
            ProcessorConfig {
                probe_endpoint: proc_cfg.name.clone(),
                timeout_ms: cfg.probe.timeout_ms,
                mutual_attestation: cfg.probe.mutual_attestation,
                advisory_probe: cfg.probe.advisory_probe,
                ..ProcessorConfig::default()
            },
            seeded(seed, &format!("processor-rng/{s}")),
        );
        let mut transport = net.transport(proc_id);
        let (session, ac) = provider.provider_begin_attestation();
        let ac = crate::wire::encode_frame(&crate::wire::ControlMessage::AC(ac)).expect("small frame");
        let mut to_processor = VecDeque::from([ac]);
        let mut to_provider: VecDeque<Vec<u8>> = VecDeque::new();
        let mut aborted = None;
        loop {
            if let Some(m) = to_processor.pop_front() {
                let Some(m) = proxy.forward(m) else { continue };
                let before = processor.last_round().and_then(|r| r.round);
                let mut connector = SimConnector { net: &net, geoclients: &mesh.geoclients, rng: &mut link_rng };
                match processor.on_message(&m, &mut transport, &mut connector) {
                    Ok(replies) => to_provider.extend(replies),
                    Err(e) => {
                        aborted = Some(error_tag(&e));
                        log::warn!("processor aborted session {s}: {e}");
                        break;
                    }
                }
                if processor.last_round().and_then(|r| r.round) == before {
                    continue;
                }
                round_index += 1;
                let r = round_index;
                processor.queue_output(|p| {
                    format!("round {r}: {}", hex::encode(&Sha256::digest(p)[..8])).into_bytes()
                })?;
                net.advance(Duration::from_secs(cfg.release_delay_s));
                let decision = processor.release_gate(net.utc_now(), &mut sink);
                let at = net.location(proc_id).expect("processor node");
                let gate = processor.last_gate().cloned().expect("gate ran");
                let report = processor.last_round().cloned().unwrap_or_default();
                if let Some(gr) = processor.last_report().filter(|g| Some(g.round) == report.round) {
                    for sm in &gr.sms {
                        measurements.push(MeasurementRow {
                            round: r,
                            src: mesh.name(&sm.issuer),
                            dst: proc_cfg.name.clone(),
                            repetitions: sm.direct_min_delay.samples,
                            min_rtt_us: sm.direct_min_delay.min_rtt.0,
                            distance_km: sm.direct_min_delay.min_rtt.0 as f64 * KM_PER_RTT_MICROSECOND,
                            verdict: decision.to_string(),
                        });
                    }
                }
                if let Some(v) = &gate.verdict {
                    region = Some((v.region.clone(), v.resolution_km));
                }
                rounds.push(RoundResult {
                    session: s,
                    round: r,
                    decision,
                    outcome: gate.verdict.as_ref().map(|v| format!("{:?}", v.outcome)),
                    area_km2: gate.verdict.as_ref().map(|v| v.area_km2()),
                    trusted_time: gate.trusted_time,
                    processor_at: at,
                    truth_in_region: gate.verdict.as_ref().map(|v| v.region.contains(at)),
                    accepted: report.accepted.iter().map(|id| mesh.name(id)).collect(),
                    failures: report.failures.iter().map(|(id, f)| (mesh.name(id), failure_tag(f))).collect(),
                    gate_error: gate.error.clone(),
                });
                log::info!("round {r}: {decision}");
                for ev in cfg.events.iter().filter(|e| e.after_round == r) {
                    let target = NodeId::from_name(&ev.relocate);
                    let to = GeoPoint::new(ev.lat, ev.lon)?;
                    log::info!(
                        "relocating {} by {:.0} km",
                        ev.relocate,
                        haversine_km(net.location(target).expect("validated"), to).km()
                    );
                    net.relocate(target, to)?;
                }
                mesh.sweep_if_due();
            } else if let Some(m) = to_provider.pop_front() {
                let Some(m) = proxy.forward(m) else { continue };
                match provider.on_message(session, &m, net.utc_now()) {
                    Ok(replies) => to_processor.extend(replies),
                    Err(e) => {
                        aborted = Some(error_tag(&e));
                        log::warn!("provider aborted session {s}: {e}");
                        break;
                    }
                }
            } else {
                break;
            }
        }
        sessions.push(SessionResult { session: s, aborted, reviews: provider.reviews(&session).to_vec() });
    }

    Ok(ScenarioResult {
        name: cfg.name.clone(),
        seed,
        rounds,
        sessions,
        measurements,
        alerts: mesh.alerts,
        released: sink.iter().map(|b| String::from_utf8_lossy(b).into_owned()).collect(),
        network: net.stats(),
        region,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: &str) -> ScenarioResult {
        let cfg = ScenarioConfig::from_toml(bundled_scenario(name).unwrap()).unwrap();
        run_scenario(&cfg).unwrap()
    }

    #[test]
    fn bundled_verdicts() {
        for (name, want) in [
            ("honest_inside", "Allow"),
            ("relocated_outside", "Deny(RegionNotProven)"),
            ("expired_window", "Deny(OutsideTimeWindow)"),
            ("stale_gr", "Deny(StaleReport)"),
            ("tampered_sm", "Deny(NoReport)"),
            ("replayed_ar", "Aborted(NonceMismatch)"),
        ] {
            let r = run(name);
            println!("{}", r.summary());
            assert_eq!(r.verdict(), want, "{name}");
            assert_eq!(r.network.violations, 0);
        }
    }
}
