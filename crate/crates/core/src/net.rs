//! Real-network drivers: length-prefixed TCP control links, UDP ping
//! responders, and thread-based daemons for each role.
//!
//! A [`Deployment`] file describes every party. Keys are derived from a
//! shared deployment secret and the party name, which is adequate for test
//! beds; a production PKI would provision them instead.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::Utc;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ProverIdentity;
use crate::crypto::{DirectoryEntry, Endpoint, KeyPair, PkiRegistry, TeeKind};
use crate::geoclient::{GeoClient, GeoClientConfig, GeoClientConnection, GEOCLIENT_CODE};
use crate::model::{GeoPoint, NodeId};
use crate::parties::{
    ClientListEntry, Credential, GeoClientConnector, ProcessorConfig, ProcessorState, ProtocolError,
    ProviderConfig, ProviderPhase, ProviderState, ReleaseDecision, ReleaseSink, RequestLink, Review,
    PROCESSOR_CODE,
};
use crate::probe::{resolve, respond_pings, ProbeSettings, UdpTransport};
use crate::sim::scenario::ConstraintsSection;
use crate::sim::SimError;
use crate::wire::{encode_frame, ControlMessage};

/// Largest control blob accepted on a TCP link.
pub const MAX_BLOB: usize = 1 << 20;

pub fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    if bytes.len() > MAX_BLOB {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "blob too large"));
    }
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// Reads one blob; `None` on a clean end of stream.
pub fn read_blob<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_BLOB {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("blob of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub struct TcpLink {
    stream: TcpStream,
}

impl RequestLink for TcpLink {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, String> {
        write_blob(&mut self.stream, request).map_err(|e| e.to_string())?;
        read_blob(&mut self.stream).map_err(|e| e.to_string())?.ok_or_else(|| "connection closed".into())
    }
}

/// Connects to GeoClient control ports over TCP.
pub struct TcpConnector {
    pub connect_timeout: Duration,
    /// Bounds one measurement; a GeoClient probing R times needs a while.
    pub io_timeout: Duration,
}

impl Default for TcpConnector {
    fn default() -> Self {
        Self { connect_timeout: Duration::from_secs(5), io_timeout: Duration::from_secs(120) }
    }
}

impl GeoClientConnector<SocketAddr> for TcpConnector {
    fn connect(&mut self, entry: &ClientListEntry) -> Result<Box<dyn RequestLink + '_>, String> {
        let addr = resolve(&entry.endpoint.control).map_err(|e| e.to_string())?;
        let stream = TcpStream::connect_timeout(&addr, self.connect_timeout).map_err(|e| e.to_string())?;
        stream.set_read_timeout(Some(self.io_timeout)).map_err(|e| e.to_string())?;
        stream.set_nodelay(true).map_err(|e| e.to_string())?;
        Ok(Box::new(TcpLink { stream }))
    }

    fn probe_addr(&self, entry: &ClientListEntry) -> Option<SocketAddr> {
        resolve(&entry.endpoint.probe).ok()
    }
}

/// A running background service; dropping it does not stop it.
pub struct Service {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl Service {
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    pub fn stop(self) {
        self.shutdown.store(true, Ordering::Relaxed);
        for h in self.handles {
            let _ = h.join();
        }
    }

    /// Blocks until another thread sets the shutdown flag.
    pub fn wait(self) {
        for h in self.handles {
            let _ = h.join();
        }
    }
}

/// Echoes pings on `bind` until stopped.
pub fn spawn_responder(bind: &str) -> io::Result<Service> {
    let mut transport = UdpTransport::bind(bind).map_err(io::Error::other)?;
    let addr = transport.local_addr().map_err(io::Error::other)?;
    let shutdown = transport.shutdown_handle();
    let h = thread::spawn(move || match respond_pings(&mut transport) {
        Ok(n) => log::info!("responder on {addr} stopped after {n} echoes"),
        Err(e) => log::error!("responder on {addr} failed: {e}"),
    });
    Ok(Service { addr, shutdown, handles: vec![h] })
}

fn serve_control(gc: &GeoClient, mut stream: TcpStream) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(300)))?;
    let mut transport = UdpTransport::bind("0.0.0.0:0").map_err(io::Error::other)?;
    let mut conn = GeoClientConnection::new();
    while let Some(req) = read_blob(&mut stream)? {
        let reply = conn.handle(gc, &req, &mut transport, |s| resolve(s).ok(), &mut OsRng);
        write_blob(&mut stream, &reply)?;
    }
    Ok(())
}

/// Runs a GeoClient: a ping responder on `probe`, a control listener on
/// `control`, and a sweeper that measures `peers` every sweep period.
/// Returns the control service; `Service::addr` is the control address.
pub fn spawn_geoclient(
    gc: Arc<GeoClient>,
    probe: &str,
    control: &str,
    peers: Vec<(NodeId, SocketAddr)>,
    sweep: ProbeSettings,
) -> io::Result<(Service, Service)> {
    let responder = spawn_responder(probe)?;
    let listener = TcpListener::bind(control)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let mut handles = Vec::new();

    let (g, stop) = (gc.clone(), shutdown.clone());
    handles.push(thread::spawn(move || {
        let mut conns = Vec::new();
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let g = g.clone();
                    conns.push(thread::spawn(move || {
                        let _ = stream.set_nonblocking(false);
                        if let Err(e) = serve_control(&g, stream) {
                            log::info!("control connection from {peer} ended: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                Err(e) => {
                    log::error!("accept failed: {e}");
                    break;
                }
            }
        }
    }));

    if !peers.is_empty() {
        let (g, stop) = (gc, shutdown.clone());
        handles.push(thread::spawn(move || {
            let mut transport = match UdpTransport::bind("0.0.0.0:0") {
                Ok(t) => t,
                Err(e) => return log::error!("sweeper socket: {e}"),
            };
            let period = g.config().sweep_period;
            loop {
                let report = g.periodic_neighbor_sweep(&mut transport, &peers, &sweep);
                log::info!("sweep: {} updated, {} gaps, {} alerts", report.updated.len(), report.gaps.len(), report.alerts.len());
                let mut waited = Duration::ZERO;
                while waited < period {
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    thread::sleep(Duration::from_millis(50));
                    waited += Duration::from_millis(50);
                }
            }
        }));
    }
    Ok((responder, Service { addr, shutdown, handles }))
}

/// Serves one processor connection to completion and returns the reviews.
pub fn serve_provider_session(provider: &mut ProviderState, mut stream: TcpStream) -> Result<Vec<Review>, ProtocolError> {
    let io_err = |e: io::Error| ProtocolError::Remote(crate::wire::ErrorMessage { code: "Io".into(), detail: e.to_string() });
    let (session, ac) = provider.provider_begin_attestation();
    write_blob(&mut stream, &encode_frame(&ControlMessage::AC(ac)).expect("small frame")).map_err(io_err)?;
    while provider.phase(&session) != Some(ProviderPhase::Reviewed) {
        let Some(msg) = read_blob(&mut stream).map_err(io_err)? else { break };
        for reply in provider.on_message(session, &msg, Utc::now())? {
            write_blob(&mut stream, &reply).map_err(io_err)?;
        }
    }
    Ok(provider.reviews(&session).to_vec())
}

/// Runs the processor against a provider at `provider`, gating after
/// every round. Returns the decision of each round.
pub fn run_processor_session(
    processor: &mut ProcessorState,
    provider: SocketAddr,
    transport: &mut UdpTransport,
    connector: &mut TcpConnector,
    sink: &mut dyn ReleaseSink,
) -> Result<Vec<ReleaseDecision>, ProtocolError> {
    let io_err = |e: io::Error| ProtocolError::Remote(crate::wire::ErrorMessage { code: "Io".into(), detail: e.to_string() });
    let mut stream = TcpStream::connect(provider).map_err(io_err)?;
    stream.set_nodelay(true).map_err(io_err)?;
    let mut decisions = Vec::new();
    while let Some(msg) = read_blob(&mut stream).map_err(io_err)? {
        let before = processor.last_round().and_then(|r| r.round);
        let replies = processor.on_message(&msg, transport, connector)?;
        if processor.last_round().and_then(|r| r.round) != before {
            processor.queue_output(|p| format!("{} payload bytes processed", p.len()).into_bytes())?;
            let d = processor.release_gate(Utc::now(), sink);
            log::info!("round {}: {d}", decisions.len() + 1);
            decisions.push(d);
        }
        for r in replies {
            write_blob(&mut stream, &r).map_err(io_err)?;
        }
    }
    Ok(decisions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoClientEntry {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "sgx")]
    pub tee: TeeKind,
    pub probe: String,
    pub control: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderEntry {
    pub listen: String,
    #[serde(default = "one")]
    pub rounds: u32,
    #[serde(default)]
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorEntry {
    pub name: String,
    #[serde(default = "sgx")]
    pub tee: TeeKind,
    /// Address GeoClients ping; must be reachable from them.
    pub probe: String,
    #[serde(default = "timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub mutual_attestation: bool,
}

fn sgx() -> TeeKind {
    TeeKind::SgxLike
}

fn one() -> u32 {
    1
}

fn timeout_ms() -> u64 {
    250
}

/// Every party of one deployment, shared by all roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deployment {
    pub secret: String,
    pub provider: ProviderEntry,
    pub processor: ProcessorEntry,
    pub constraints: ConstraintsSection,
    #[serde(default)]
    pub geoclient_config: GeoClientConfig,
    pub geoclients: Vec<GeoClientEntry>,
}

impl Deployment {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let d: Self = toml::from_str(text)?;
        d.constraints.to_constraints()?;
        for g in &d.geoclients {
            GeoPoint::new(g.lat, g.lon)?;
        }
        Ok(d)
    }

    fn seed(&self, label: &str) -> [u8; 32] {
        Sha256::new().chain_update(self.secret.as_bytes()).chain_update([0]).chain_update(label.as_bytes()).finalize().into()
    }

    fn prover(&self, name: &str, tee: TeeKind, code: &[u8]) -> ProverIdentity {
        ProverIdentity {
            id: NodeId::from_name(name),
            identity: KeyPair::from_seed(self.seed(&format!("identity/{name}"))),
            platform: KeyPair::from_seed(self.seed(&format!("platform/{name}"))),
            code_identity: code.to_vec(),
            tee_kind: tee,
        }
    }

    fn provider_key(&self) -> KeyPair {
        KeyPair::from_seed(self.seed("provider"))
    }

    /// Trust anchors every party shares: all platforms, both code identities
    /// and the GeoClient directory.
    pub fn registry(&self) -> PkiRegistry {
        let mut r = PkiRegistry::default();
        r.allow_code(GEOCLIENT_CODE);
        r.allow_code(PROCESSOR_CODE);
        r.trust_platform(self.prover(&self.processor.name, self.processor.tee, PROCESSOR_CODE).platform.public());
        for g in &self.geoclients {
            let p = self.prover(&g.name, g.tee, GEOCLIENT_CODE);
            r.trust_platform(p.platform.public());
            r.register_geoclient(
                p.id,
                DirectoryEntry {
                    public_key: p.identity.public(),
                    endpoint: Endpoint { probe: g.probe.clone(), control: g.control.clone() },
                    location: GeoPoint::new(g.lat, g.lon).ok(),
                },
            );
        }
        r
    }

    pub fn geoclient_entry(&self, name: &str) -> Option<&GeoClientEntry> {
        self.geoclients.iter().find(|g| g.name == name)
    }

    pub fn geoclient(&self, name: &str) -> Option<GeoClient> {
        let g = self.geoclient_entry(name)?;
        Some(GeoClient::new(self.prover(&g.name, g.tee, GEOCLIENT_CODE), self.geoclient_config.clone(), self.registry()))
    }

    /// Probe addresses of every other GeoClient, for sweeps.
    pub fn sweep_peers(&self, name: &str) -> Vec<(NodeId, SocketAddr)> {
        self.geoclients
            .iter()
            .filter(|g| g.name != name)
            .filter_map(|g| match resolve(&g.probe) {
                Ok(a) => Some((NodeId::from_name(&g.name), a)),
                Err(e) => {
                    log::warn!("skipping peer {}: {e}", g.name);
                    None
                }
            })
            .collect()
    }

    pub fn provider_state(&self) -> Result<ProviderState, SimError> {
        Ok(ProviderState::new(
            NodeId::from_name("provider"),
            self.provider_key(),
            self.registry(),
            self.constraints.to_constraints()?,
            self.provider.payload.clone().into_bytes(),
            ProviderConfig { rounds: self.provider.rounds, ..ProviderConfig::default() },
            rand::Rng::gen(&mut OsRng),
        )?)
    }

    /// Credential the provider would issue to the consumer of this deployment.
    pub fn credential(&self) -> Credential {
        Credential::issue("consumer", "dataset", Utc::now() + chrono::Duration::days(1), &self.provider_key())
    }

    pub fn processor_state(&self) -> ProcessorState {
        let p = &self.processor;
        ProcessorState::new(
            self.prover(&p.name, p.tee, PROCESSOR_CODE),
            self.registry(),
            self.provider_key().public(),
            self.credential(),
            ProcessorConfig {
                probe_endpoint: p.probe.clone(),
                timeout_ms: p.timeout_ms,
                mutual_attestation: p.mutual_attestation,
                ..ProcessorConfig::default()
            },
            rand::Rng::gen(&mut OsRng),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_framing() {
        let mut buf = Vec::new();
        write_blob(&mut buf, b"hello").unwrap();
        write_blob(&mut buf, b"").unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_blob(&mut r).unwrap().unwrap(), b"hello");
        assert_eq!(read_blob(&mut r).unwrap().unwrap(), b"");
        assert!(read_blob(&mut r).unwrap().is_none());
        let huge = ((MAX_BLOB + 1) as u32).to_be_bytes();
        assert!(read_blob(&mut huge.as_slice()).is_err());
    }
}
