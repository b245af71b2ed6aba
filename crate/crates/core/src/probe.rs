//! Minimum-RTT measurement engine.
//!
//! A session sends `R` sequenced ping requests one at a time, waits for the
//! matching echo (or the per-sample timeout) before sending the next, and
//! keeps the minimum round-trip time. Only the minimum is a sound upper bound
//! on distance, so no other statistic is recorded in [`MinDelayRecord`].

use std::fmt::Debug;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::TeeKind;
use crate::model::{to_micros, DelayMicros, NodeId, Timestamp};
use crate::wire::{decode_ping, encode_ping, Direction, PingPacket, PING_LEN};

pub const DEFAULT_PROBE_PORT: u16 = 47474;
pub const DEFAULT_REPETITIONS: u32 = 1000;
pub const DEFAULT_SEV_REPETITIONS: u32 = 10_000;
pub const DEFAULT_SAMPLE_TIMEOUT: Duration = Duration::from_millis(250);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("transport closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbeError {
    #[error("all {sent} samples lost")]
    AllSamplesLost { sent: u32 },
    #[error("transport closed")]
    TransportClosed,
    #[error("invalid probe settings: {0}")]
    InvalidSettings(&'static str),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<TransportError> for ProbeError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Closed => ProbeError::TransportClosed,
            TransportError::Io(s) => ProbeError::Io(s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datagram<A> {
    pub bytes: Vec<u8>,
    pub from: A,
    /// Local monotonic receive time in microseconds.
    pub at_micros: u64,
}

/// Datagram transport with a local monotonic clock.
pub trait Transport {
    type Addr: Clone + PartialEq + Debug;

    fn send(&mut self, bytes: &[u8], to: &Self::Addr) -> Result<(), TransportError>;

    /// Waits up to `timeout` for one datagram; `Ok(None)` on timeout.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Datagram<Self::Addr>>, TransportError>;

    /// Monotonic microseconds since an arbitrary epoch.
    fn now_micros(&self) -> u64;

    /// Wall-clock time, used only for record timestamps.
    fn utc_now(&self) -> Timestamp;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub repetitions: u32,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { repetitions: DEFAULT_REPETITIONS, timeout: DEFAULT_SAMPLE_TIMEOUT }
    }
}

impl ProbeSettings {
    pub fn new(repetitions: u32, timeout: Duration) -> Self {
        Self { repetitions, timeout }
    }

    /// Defaults for a TEE profile; SEV-like hosts need more repetitions.
    pub fn for_tee(kind: TeeKind) -> Self {
        let repetitions = match kind {
            TeeKind::SevLike => DEFAULT_SEV_REPETITIONS,
            _ => DEFAULT_REPETITIONS,
        };
        Self { repetitions, ..Self::default() }
    }

    fn validate(&self) -> Result<(), ProbeError> {
        if self.repetitions == 0 {
            return Err(ProbeError::InvalidSettings("repetitions must be at least 1"));
        }
        if self.timeout.is_zero() {
            return Err(ProbeError::InvalidSettings("timeout must be positive"));
        }
        Ok(())
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Lowest observed RTT to a peer over `samples` completed round trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinDelayRecord {
    pub peer: NodeId,
    pub min_rtt: DelayMicros,
    pub samples: u32,
    pub measured_at: Timestamp,
}

/// Per-sample outcome of one probe session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSamples {
    pub rtts: Vec<DelayMicros>,
    pub lost: u32,
    pub finished_at: Timestamp,
}

impl ProbeSamples {
    pub fn min(&self) -> Option<DelayMicros> {
        self.rtts.iter().copied().min()
    }

    pub fn into_record(self, peer: NodeId) -> Result<MinDelayRecord, ProbeError> {
        let min_rtt = self.min().ok_or(ProbeError::AllSamplesLost { sent: self.lost })?;
        Ok(MinDelayRecord {
            peer,
            min_rtt,
            samples: self.rtts.len() as u32,
            measured_at: self.finished_at,
        })
    }
}

/// Runs one sequential probe session and returns every completed RTT.
pub fn probe_samples<T: Transport>(
    transport: &mut T,
    peer: &T::Addr,
    settings: &ProbeSettings,
    session_id: [u8; 16],
) -> Result<ProbeSamples, ProbeError> {
    settings.validate()?;
    let timeout_us = settings.timeout.as_micros() as u64;
    let mut rtts = Vec::with_capacity(settings.repetitions as usize);
    let mut lost = 0u32;
    for seq in 0..settings.repetitions {
        let request = encode_ping(&PingPacket::request(session_id, seq));
        let sent_at = transport.now_micros();
        transport.send(&request, peer)?;
        let deadline = sent_at + timeout_us;
        loop {
            let now = transport.now_micros();
            if now >= deadline {
                lost += 1;
                break;
            }
            match transport.recv(Duration::from_micros(deadline - now))? {
                None => {
                    lost += 1;
                    break;
                }
                Some(d) => {
                    let matched = d.from == *peer
                        && matches!(decode_ping(&d.bytes), Ok(p)
                            if p.direction == Direction::Echo
                                && p.session_id == session_id
                                && p.seq == seq);
                    if matched {
                        rtts.push(DelayMicros(d.at_micros.saturating_sub(sent_at)));
                        break;
                    }
                }
            }
        }
    }
    Ok(ProbeSamples { rtts, lost, finished_at: to_micros(transport.utc_now()) })
}

pub fn measure_min_delay<T: Transport>(
    transport: &mut T,
    peer: &T::Addr,
    peer_id: NodeId,
    settings: &ProbeSettings,
    session_id: [u8; 16],
) -> Result<MinDelayRecord, ProbeError> {
    probe_samples(transport, peer, settings, session_id)?.into_record(peer_id)
}

/// The echo for a valid request datagram, or `None` for anything else.
pub fn echo_reply(bytes: &[u8]) -> Option<[u8; PING_LEN]> {
    match decode_ping(bytes) {
        Ok(p) if p.direction == Direction::Request => Some(encode_ping(&p.echo())),
        _ => None,
    }
}

/// Echoes ping requests until the transport closes. Returns the number of
/// echoes sent.
pub fn respond_pings<T: Transport>(transport: &mut T) -> Result<u64, ProbeError> {
    let mut served = 0u64;
    loop {
        match transport.recv(Duration::from_millis(500)) {
            Ok(Some(d)) => match echo_reply(&d.bytes) {
                Some(reply) => {
                    transport.send(&reply, &d.from)?;
                    served += 1;
                }
                None => log::debug!("dropping {}-byte datagram from {:?}", d.bytes.len(), d.from),
            },
            Ok(None) => {}
            Err(TransportError::Closed) => return Ok(served),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Real UDP transport.
pub struct UdpTransport {
    socket: UdpSocket,
    epoch: Instant,
    shutdown: Arc<AtomicBool>,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self, TransportError> {
        let socket = UdpSocket::bind(addr).map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(Self {
            socket,
            epoch: Instant::now(),
            shutdown: Arc::new(AtomicBool::new(false)),
            buf: vec![0u8; 2048],
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        self.socket.local_addr().map_err(|e| TransportError::Io(e.to_string()))
    }

    /// Flag that makes `recv` report `Closed` once set.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }
}

pub fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .map_err(|e| TransportError::Io(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| TransportError::Io(format!("{addr}: no address")))
}

impl Transport for UdpTransport {
    type Addr = SocketAddr;

    fn send(&mut self, bytes: &[u8], to: &SocketAddr) -> Result<(), TransportError> {
        if self.shutdown.load(Ordering::Relaxed) {
            return Err(TransportError::Closed);
        }
        match self.socket.send_to(bytes, to) {
            Ok(_) => Ok(()),
            // ICMP unreachable from an earlier send surfaces here on some platforms
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => Ok(()),
            Err(e) => Err(TransportError::Io(e.to_string())),
        }
    }

    fn recv(&mut self, timeout: Duration) -> Result<Option<Datagram<SocketAddr>>, TransportError> {
        if self.shutdown.load(Ordering::Relaxed) {
            return Err(TransportError::Closed);
        }
        let timeout = timeout.max(Duration::from_micros(1));
        self.socket
            .set_read_timeout(Some(timeout))
            .map_err(|e| TransportError::Io(e.to_string()))?;
        match self.socket.recv_from(&mut self.buf) {
            Ok((n, from)) => {
                let at_micros = self.now_micros();
                Ok(Some(Datagram { bytes: self.buf[..n].to_vec(), from, at_micros }))
            }
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock
                        | std::io::ErrorKind::TimedOut
                        | std::io::ErrorKind::ConnectionRefused
                ) =>
            {
                if self.shutdown.load(Ordering::Relaxed) {
                    Err(TransportError::Closed)
                } else {
                    Ok(None)
                }
            }
            Err(e) => Err(TransportError::Io(e.to_string())),
        }
    }

    fn now_micros(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn utc_now(&self) -> Timestamp {
        Utc::now()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Scripted transport: every request is answered after a fixed delay,
    /// optionally preceded by a stray echo with the wrong sequence number.
    struct Scripted {
        clock: u64,
        rtt: u64,
        stray: bool,
        drop_every: Option<u32>,
        pending: VecDeque<(u64, Vec<u8>)>,
    }

    impl Transport for Scripted {
        type Addr = u8;

        fn send(&mut self, bytes: &[u8], _to: &u8) -> Result<(), TransportError> {
            let p = decode_ping(bytes).unwrap();
            if self.drop_every.is_some_and(|k| p.seq.is_multiple_of(k)) {
                return Ok(());
            }
            if self.stray {
                let mut wrong = p.echo();
                wrong.seq = wrong.seq.wrapping_add(1000);
                self.pending.push_back((self.clock + 1, encode_ping(&wrong).to_vec()));
            }
            self.pending.push_back((self.clock + self.rtt, encode_ping(&p.echo()).to_vec()));
            Ok(())
        }

        fn recv(&mut self, timeout: Duration) -> Result<Option<Datagram<u8>>, TransportError> {
            let deadline = self.clock + timeout.as_micros() as u64;
            match self.pending.front() {
                Some((t, _)) if *t <= deadline => {
                    let (t, bytes) = self.pending.pop_front().unwrap();
                    self.clock = self.clock.max(t);
                    Ok(Some(Datagram { bytes, from: 1, at_micros: self.clock }))
                }
                _ => {
                    self.clock = deadline;
                    Ok(None)
                }
            }
        }

        fn now_micros(&self) -> u64 {
            self.clock
        }

        fn utc_now(&self) -> Timestamp {
            Timestamp::default()
        }
    }

    fn scripted(rtt: u64) -> Scripted {
        Scripted { clock: 0, rtt, stray: false, drop_every: None, pending: VecDeque::new() }
    }

    #[test]
    fn constant_rtt() {
        let mut t = scripted(1000);
        let rec = measure_min_delay(&mut t, &1, NodeId::from_name("p"), &ProbeSettings::new(10, DEFAULT_SAMPLE_TIMEOUT), [1; 16])
            .unwrap();
        assert_eq!(rec.min_rtt, DelayMicros(1000));
        assert_eq!(rec.samples, 10);
    }

    #[test]
    fn stray_echo_ignored() {
        let mut t = scripted(700);
        t.stray = true;
        let s = probe_samples(&mut t, &1, &ProbeSettings::new(5, DEFAULT_SAMPLE_TIMEOUT), [2; 16]).unwrap();
        assert_eq!(s.rtts, vec![DelayMicros(700); 5]);
        assert_eq!(s.lost, 0);
    }

    #[test]
    fn lost_samples_excluded() {
        let mut t = scripted(300);
        t.drop_every = Some(2);
        let s = probe_samples(&mut t, &1, &ProbeSettings::new(10, Duration::from_millis(1)), [3; 16]).unwrap();
        assert_eq!(s.rtts.len(), 5);
        assert_eq!(s.lost, 5);
    }

    #[test]
    fn all_lost() {
        let mut t = scripted(300);
        t.drop_every = Some(1);
        let err = measure_min_delay(&mut t, &1, NodeId::from_name("p"), &ProbeSettings::new(4, Duration::from_millis(1)), [4; 16])
            .unwrap_err();
        assert_eq!(err, ProbeError::AllSamplesLost { sent: 4 });
    }

    #[test]
    fn late_echo_counts_as_lost() {
        let mut t = scripted(2_000);
        let s = probe_samples(&mut t, &1, &ProbeSettings::new(3, Duration::from_millis(1)), [5; 16]).unwrap();
        assert!(s.rtts.is_empty());
        assert_eq!(s.lost, 3);
    }

    #[test]
    fn invalid_settings() {
        let mut t = scripted(1);
        assert!(matches!(
            probe_samples(&mut t, &1, &ProbeSettings::new(0, DEFAULT_SAMPLE_TIMEOUT), [0; 16]),
            Err(ProbeError::InvalidSettings(_))
        ));
    }

    #[test]
    fn echo_reply_rules() {
        let req = encode_ping(&PingPacket::request([9; 16], 7));
        let echo = decode_ping(&echo_reply(&req).unwrap()).unwrap();
        assert_eq!(echo, PingPacket { session_id: [9; 16], seq: 7, direction: Direction::Echo });
        assert!(echo_reply(&req[..31]).is_none());
        assert!(echo_reply(&encode_ping(&echo)).is_none());
    }

    #[test]
    fn sev_default_repetitions() {
        assert_eq!(ProbeSettings::for_tee(TeeKind::SevLike).repetitions, 10_000);
        assert_eq!(ProbeSettings::for_tee(TeeKind::SgxLike).repetitions, 1000);
    }
}
