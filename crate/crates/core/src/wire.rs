//! Byte layouts shared by the real-UDP and simulated transports.
//!
//! Ping packets are fixed 32-byte datagrams:
//!
//! ```text
//! 0..4    magic "DGPG"
//! 4..20   session id
//! 20..24  sequence number, big-endian u32
//! 24      direction (0 = request, 1 = echo)
//! 25..32  zero padding (byte 25 is a reserved version byte, always 0)
//! ```
//!
//! Control frames are a big-endian u32 length followed by a canonical JSON
//! object (sorted keys, no insignificant whitespace) whose `"type"` field
//! names the message.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{AttestationChallenge, AttestationResponse};
use crate::geoclient::{MeasurementRequest, SignedMeasurements};
use crate::parties::{
    ClientListMessage, ConstraintsMessage, DataMessage, DataRequest, GeolocationReport,
};

pub const PING_MAGIC: [u8; 4] = *b"DGPG";
pub const PING_LEN: usize = 32;
pub const MAX_FRAME_BODY: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("expected 32 bytes, got {0}")]
    BadLength(usize),
    #[error("bad direction byte {0}")]
    BadDirection(u8),
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("frame body of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("malformed body: {0}")]
    MalformedBody(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Request = 0,
    Echo = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PingPacket {
    pub session_id: [u8; 16],
    pub seq: u32,
    pub direction: Direction,
}

impl PingPacket {
    pub fn request(session_id: [u8; 16], seq: u32) -> Self {
        Self { session_id, seq, direction: Direction::Request }
    }

    /// Same session and sequence with the direction flipped to echo.
    pub fn echo(&self) -> Self {
        Self { direction: Direction::Echo, ..*self }
    }
}

pub fn encode_ping(p: &PingPacket) -> [u8; PING_LEN] {
    let mut out = [0u8; PING_LEN];
    out[..4].copy_from_slice(&PING_MAGIC);
    out[4..20].copy_from_slice(&p.session_id);
    out[20..24].copy_from_slice(&p.seq.to_be_bytes());
    out[24] = p.direction as u8;
    out
}

pub fn decode_ping(bytes: &[u8]) -> Result<PingPacket, WireError> {
    if bytes.len() != PING_LEN {
        return Err(WireError::BadLength(bytes.len()));
    }
    if bytes[..4] != PING_MAGIC {
        return Err(WireError::BadMagic);
    }
    let direction = match bytes[24] {
        0 => Direction::Request,
        1 => Direction::Echo,
        d => return Err(WireError::BadDirection(d)),
    };
    let mut session_id = [0u8; 16];
    session_id.copy_from_slice(&bytes[4..20]);
    let seq = u32::from_be_bytes(bytes[20..24].try_into().expect("4 bytes"));
    Ok(PingPacket { session_id, seq, direction })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: String,
    pub detail: String,
}

/// Every message that travels on a control channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
#[allow(clippy::large_enum_variant)]
pub enum ControlMessage {
    AC(AttestationChallenge),
    AR(AttestationResponse),
    DR(DataRequest),
    Constraints(ConstraintsMessage),
    Data(DataMessage),
    MR(MeasurementRequest),
    SM(SignedMeasurements),
    GR(GeolocationReport),
    CL(ClientListMessage),
    Error(ErrorMessage),
}

pub const MESSAGE_TYPES: [&str; 10] =
    ["AC", "AR", "DR", "Constraints", "Data", "MR", "SM", "GR", "CL", "Error"];

impl ControlMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ControlMessage::AC(_) => "AC",
            ControlMessage::AR(_) => "AR",
            ControlMessage::DR(_) => "DR",
            ControlMessage::Constraints(_) => "Constraints",
            ControlMessage::Data(_) => "Data",
            ControlMessage::MR(_) => "MR",
            ControlMessage::SM(_) => "SM",
            ControlMessage::GR(_) => "GR",
            ControlMessage::CL(_) => "CL",
            ControlMessage::Error(_) => "Error",
        }
    }
}

/// Canonical JSON: object keys sorted, compact separators.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Value keeps object keys in a BTreeMap, so re-serialising
    // through it sorts every nested object.
    let v = serde_json::to_value(value).expect("message types serialise to JSON");
    serde_json::to_vec(&v).expect("JSON values serialise")
}

pub fn encode_frame(msg: &ControlMessage) -> Result<Vec<u8>, WireError> {
    let body = canonical_json(msg);
    if body.len() > MAX_FRAME_BODY {
        return Err(WireError::Oversize(body.len()));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_body(body: &[u8]) -> Result<ControlMessage, WireError> {
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| WireError::MalformedBody(e.to_string()))?;
    let ty = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| WireError::MalformedBody("missing \"type\" discriminator".into()))?;
    if !MESSAGE_TYPES.contains(&ty) {
        return Err(WireError::UnknownType(ty.to_string()));
    }
    serde_json::from_value(value).map_err(|e| WireError::MalformedBody(e.to_string()))
}

/// Decodes the first frame in `bytes`, returning the message and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(ControlMessage, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated { need: 4, have: bytes.len() });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME_BODY {
        return Err(WireError::Oversize(len));
    }
    let have = bytes.len() - 4;
    if len > have {
        return Err(WireError::Truncated { need: len, have });
    }
    Ok((decode_body(&bytes[4..4 + len])?, 4 + len))
}

/// Serde helper: byte strings as standard base64.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}
