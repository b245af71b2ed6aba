#![allow(dead_code)]

use chrono::{TimeZone, Utc};

use dgate::channel::{AttestationChallenge, AttestationResponse};
use dgate::crypto::{attest, Endpoint, ExchangeKey, KeyPair, Nonce, PublicKey, Signature, TeeKind};
use dgate::geoclient::{MeasurementRequest, SignedMeasurements};
use dgate::model::{DelayMicros, GeoPoint, Geofence, NodeId, TimeWindow, Timestamp, UsageConstraints};
use dgate::parties::{
    ClientList, ClientListEntry, ClientListMessage, ConstraintsMessage, Credential, DataMessage, DataRequest,
    GeolocationReport,
};
use dgate::probe::MinDelayRecord;
use dgate::wire::{ControlMessage, ErrorMessage};

pub fn t(h: u32, m: u32, s: u32) -> Timestamp {
    Utc.with_ymd_and_hms(2026, 3, 2, h, m, s).unwrap()
}

pub fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

fn key(n: u8) -> KeyPair {
    KeyPair::from_seed([n; 32])
}

fn record(peer: &str, us: u64) -> MinDelayRecord {
    MinDelayRecord { peer: NodeId::from_name(peer), min_rtt: DelayMicros(us), samples: 1000, measured_at: t(9, 0, 0) }
}

/// One fixed instance of every control message type, in wire-type order.
pub fn golden_messages() -> Vec<ControlMessage> {
    let session = Nonce::from_bytes([1; 16]);
    let nonce = Nonce::from_bytes([2; 16]);
    let report = attest(b"dgate-processor/1", nonce, key(3).public(), TeeKind::SgxLike, &key(4));
    let sm = SignedMeasurements::new(
        NodeId::from_name("paris"),
        record("frankfurt-dc", 4210),
        vec![record("lyon", 2300), record("brussels", 1900)],
        t(9, 0, 1),
        Nonce::from_bytes([5; 16]),
        &key(6),
    );
    let entry = ClientListEntry {
        id: NodeId::from_name("paris"),
        endpoint: Endpoint { probe: "192.0.2.10:47474".into(), control: "192.0.2.10:47475".into() },
        public_key: key(6).public(),
        location: pt(48.8566, 2.3522),
    };
    let constraints = UsageConstraints {
        geofence: Geofence::new(vec![pt(42.0, -5.0), pt(42.0, 24.0), pt(57.0, 24.0), pt(57.0, -5.0)]).unwrap(),
        time_window: TimeWindow::new(t(8, 0, 0), t(18, 0, 0)).unwrap(),
        min_geoclients: 5,
        repetitions: 1000,
        max_report_age_s: 120,
    };
    vec![
        ControlMessage::AC(AttestationChallenge { session, nonce, exchange_key: ExchangeKey::from_bytes([7; 32]) }),
        ControlMessage::AR(AttestationResponse {
            session,
            report: report.clone(),
            prover: NodeId::from_name("frankfurt-dc"),
            exchange_key: ExchangeKey::from_bytes([8; 32]),
            wrapped_key: vec![9; 32],
            transcript_signature: Signature::from_bytes([10; 64]),
            counter_challenge: Some(Nonce::from_bytes([11; 16])),
        }),
        ControlMessage::DR(DataRequest { credential: Credential::issue("consumer", "dataset", t(23, 0, 0), &key(12)) }),
        ControlMessage::Constraints(ConstraintsMessage { constraints }),
        ControlMessage::Data(DataMessage { payload: b"rows 1..100".to_vec() }),
        ControlMessage::MR(MeasurementRequest {
            round: Nonce::from_bytes([13; 16]),
            nonce: Nonce::from_bytes([5; 16]),
            repetitions: 1000,
            timeout_ms: 250,
            requester: NodeId::from_name("frankfurt-dc"),
            requester_probe: "198.51.100.7:47474".into(),
            requester_report: None,
        }),
        ControlMessage::SM(sm.clone()),
        ControlMessage::GR(GeolocationReport {
            round: Nonce::from_bytes([13; 16]),
            processor: NodeId::from_name("frankfurt-dc"),
            sms: vec![sm],
            assembled_at: t(9, 0, 2),
            platform_report: report,
            signature: Signature::from_bytes([14; 64]),
        }),
        ControlMessage::CL(ClientListMessage {
            session,
            list: Some(ClientList {
                session,
                round: Nonce::from_bytes([13; 16]),
                repetitions: 1000,
                geoclients: vec![entry],
                signature: Signature::from_bytes([15; 64]),
            }),
        }),
        ControlMessage::Error(ErrorMessage { code: "NotAttested".into(), detail: "handshake first".into() }),
    ]
}

pub fn unused_key() -> PublicKey {
    key(0).public()
}
