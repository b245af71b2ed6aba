//! Attested key exchange and the AES-128-GCM record channel that carries
//! control frames once it completes.
//!
//! The verifier sends a challenge with a fresh nonce and an X25519 value. The
//! prover answers with a platform-signed report bound to its identity key,
//! picks a random session key, wraps it for the verifier and signs the whole
//! transcript with the attested identity key.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    attest, verify_ar, AttestationReport, ExchangeKey, KeyExchange, KeyPair, Nonce, PkiRegistry,
    PublicKey, Rejection, SessionKey, Signature, TeeKind,
};
use crate::model::NodeId;
use crate::wire::{decode_frame, encode_frame, ControlMessage, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationChallenge {
    pub session: Nonce,
    pub nonce: Nonce,
    pub exchange_key: ExchangeKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationResponse {
    pub session: Nonce,
    pub report: AttestationReport,
    pub prover: NodeId,
    pub exchange_key: ExchangeKey,
    #[serde(with = "crate::wire::b64")]
    pub wrapped_key: Vec<u8>,
    pub transcript_signature: Signature,
    /// Nonce the prover wants the verifier to attest against in turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter_challenge: Option<Nonce>,
}

impl AttestationResponse {
    fn transcript(&self, verifier_key: &ExchangeKey) -> Vec<u8> {
        let mut t = Vec::with_capacity(256);
        t.extend_from_slice(b"dgate-transcript");
        t.extend_from_slice(self.session.as_bytes());
        t.extend_from_slice(self.report.nonce.as_bytes());
        t.extend_from_slice(verifier_key.as_bytes());
        t.extend_from_slice(self.prover.as_bytes());
        t.extend_from_slice(self.exchange_key.as_bytes());
        t.extend_from_slice(&(self.wrapped_key.len() as u32).to_be_bytes());
        t.extend_from_slice(&self.wrapped_key);
        match &self.counter_challenge {
            Some(n) => {
                t.push(1);
                t.extend_from_slice(n.as_bytes());
            }
            None => t.push(0),
        }
        t
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("attestation rejected: {0}")]
    Rejected(Rejection),
    #[error("response belongs to another session")]
    SessionMismatch,
    #[error("attested key is not the one registered for this peer")]
    IdentityMismatch,
    #[error("transcript signature invalid")]
    BadTranscript,
    #[error("session key could not be unwrapped")]
    KeyUnwrap,
}

/// Everything a node needs to answer a challenge: its identity, the platform
/// key that vouches for it and the code it claims to run.
#[derive(Debug, Clone)]
pub struct ProverIdentity {
    pub id: NodeId,
    pub identity: KeyPair,
    pub platform: KeyPair,
    pub code_identity: Vec<u8>,
    pub tee_kind: TeeKind,
}

impl ProverIdentity {
    /// Platform-signed report over `nonce` binding this node's identity key.
    pub fn report(&self, nonce: Nonce) -> AttestationReport {
        attest(&self.code_identity, nonce, self.identity.public(), self.tee_kind, &self.platform)
    }

    pub fn respond<R: RngCore + CryptoRng>(
        &self,
        ac: &AttestationChallenge,
        counter_challenge: Option<Nonce>,
        rng: &mut R,
    ) -> (AttestationResponse, SecureChannel) {
        let kx = KeyExchange::new(rng);
        let key = SessionKey::random(rng);
        let wrapped_key = kx.wrap(&ac.exchange_key, &ac.nonce, &key);
        let mut ar = AttestationResponse {
            session: ac.session,
            report: self.report(ac.nonce),
            prover: self.id,
            exchange_key: kx.public(),
            wrapped_key,
            transcript_signature: Signature::from_bytes([0; 64]),
            counter_challenge,
        };
        ar.transcript_signature = self.identity.sign(&ar.transcript(&ac.exchange_key));
        (ar, SecureChannel::new(key, ac.session, Role::Prover))
    }
}

/// Verifier half of a handshake in progress.
pub struct Challenger {
    session: Nonce,
    nonce: Nonce,
    kx: KeyExchange,
}

impl Challenger {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { session: Nonce::random(rng), nonce: Nonce::random(rng), kx: KeyExchange::new(rng) }
    }

    pub fn session(&self) -> Nonce {
        self.session
    }

    pub fn nonce(&self) -> Nonce {
        self.nonce
    }

    pub fn challenge(&self) -> AttestationChallenge {
        AttestationChallenge { session: self.session, nonce: self.nonce, exchange_key: self.kx.public() }
    }

    /// Verifies the response and opens the channel. `expected_identity`
    /// pins the prover's key when the verifier already knows it.
    pub fn complete(
        &self,
        ar: &AttestationResponse,
        registry: &PkiRegistry,
        expected_identity: Option<&PublicKey>,
    ) -> Result<AttestedPeer, HandshakeError> {
        verify_ar(&ar.report, &self.nonce, registry).into_result().map_err(HandshakeError::Rejected)?;
        if ar.session != self.session {
            return Err(HandshakeError::SessionMismatch);
        }
        if expected_identity.is_some_and(|k| *k != ar.report.key_binding) {
            return Err(HandshakeError::IdentityMismatch);
        }
        if !ar.report.key_binding.verify(&ar.transcript(&self.kx.public()), &ar.transcript_signature) {
            return Err(HandshakeError::BadTranscript);
        }
        let key = self
            .kx
            .unwrap(&ar.exchange_key, &self.nonce, &ar.wrapped_key)
            .map_err(|_| HandshakeError::KeyUnwrap)?;
        Ok(AttestedPeer {
            id: ar.prover,
            identity_key: ar.report.key_binding,
            platform_key: ar.report.platform_key,
            tee_kind: ar.report.tee_kind,
            counter_challenge: ar.counter_challenge,
            channel: SecureChannel::new(key, self.session, Role::Verifier),
        })
    }
}

/// A prover that passed verification, with the pinned keys and its channel.
#[derive(Debug)]
pub struct AttestedPeer {
    pub id: NodeId,
    pub identity_key: PublicKey,
    pub platform_key: PublicKey,
    pub tee_kind: TeeKind,
    pub counter_challenge: Option<Nonce>,
    pub channel: SecureChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Verifier,
    Prover,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Verifier => 0x56,
            Role::Prover => 0x50,
        }
    }

    fn peer(self) -> Role {
        match self {
            Role::Verifier => Role::Prover,
            Role::Prover => Role::Verifier,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("record shorter than its header")]
    Truncated,
    #[error("record {got} out of order, expected {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("record failed authentication")]
    Decrypt,
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Ordered, authenticated records. Each record is an 8-byte big-endian
/// sequence number followed by the AES-128-GCM ciphertext of one control
/// frame; the nonce is derived from the sender role and sequence number.
#[derive(Debug)]
pub struct SecureChannel {
    key: SessionKey,
    session: Nonce,
    role: Role,
    send_seq: u64,
    recv_seq: u64,
}

impl SecureChannel {
    fn new(key: SessionKey, session: Nonce, role: Role) -> Self {
        Self { key, session, role, send_seq: 0, recv_seq: 0 }
    }

    pub fn session(&self) -> Nonce {
        self.session
    }

    fn nonce_aad(&self, role: Role, seq: u64) -> ([u8; 12], Vec<u8>) {
        let mut n = [0u8; 12];
        n[0] = role.tag();
        n[4..].copy_from_slice(&seq.to_be_bytes());
        let mut aad = self.session.as_bytes().to_vec();
        aad.push(role.tag());
        (n, aad)
    }

    pub fn seal(&mut self, msg: &ControlMessage) -> Result<Vec<u8>, ChannelError> {
        let frame = encode_frame(msg)?;
        let seq = self.send_seq;
        self.send_seq += 1;
        let (nonce, aad) = self.nonce_aad(self.role, seq);
        let mut out = seq.to_be_bytes().to_vec();
        out.extend_from_slice(&self.key.seal(nonce, &aad, &frame));
        Ok(out)
    }

    pub fn open(&mut self, record: &[u8]) -> Result<ControlMessage, ChannelError> {
        if record.len() < 8 {
            return Err(ChannelError::Truncated);
        }
        let seq = u64::from_be_bytes(record[..8].try_into().expect("8 bytes"));
        if seq != self.recv_seq {
            return Err(ChannelError::OutOfOrder { expected: self.recv_seq, got: seq });
        }
        let (nonce, aad) = self.nonce_aad(self.role.peer(), seq);
        let frame = self.key.open(nonce, &aad, &record[8..]).map_err(|_| ChannelError::Decrypt)?;
        let (msg, used) = decode_frame(&frame)?;
        if used != frame.len() {
            return Err(WireError::MalformedBody("trailing bytes after frame".into()).into());
        }
        self.recv_seq += 1;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::ErrorMessage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const CODE: &[u8] = b"dgate-processor/1";

    fn setup() -> (ChaCha20Rng, ProverIdentity, PkiRegistry) {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let prover = ProverIdentity {
            id: NodeId::from_name("processor"),
            identity: KeyPair::generate(&mut rng),
            platform: KeyPair::generate(&mut rng),
            code_identity: CODE.to_vec(),
            tee_kind: TeeKind::SgxLike,
        };
        let mut reg = PkiRegistry::default();
        reg.trust_platform(prover.platform.public());
        reg.allow_code(CODE);
        (rng, prover, reg)
    }

    fn msg(detail: &str) -> ControlMessage {
        ControlMessage::Error(ErrorMessage { code: "Test".into(), detail: detail.into() })
    }

    #[test]
    fn handshake_and_records() {
        let (mut rng, prover, reg) = setup();
        let ch = Challenger::new(&mut rng);
        let (ar, mut p_chan) = prover.respond(&ch.challenge(), None, &mut rng);
        let mut peer = ch.complete(&ar, &reg, Some(&prover.identity.public())).unwrap();
        assert_eq!(peer.id, prover.id);
        assert_eq!(peer.platform_key, prover.platform.public());

        let rec = peer.channel.seal(&msg("to prover")).unwrap();
        assert_eq!(p_chan.open(&rec).unwrap(), msg("to prover"));
        let rec = p_chan.seal(&msg("to verifier")).unwrap();
        assert_eq!(peer.channel.open(&rec).unwrap(), msg("to verifier"));
    }

    #[test]
    fn replayed_response_is_nonce_mismatch() {
        let (mut rng, prover, reg) = setup();
        let first = Challenger::new(&mut rng);
        let (old_ar, _) = prover.respond(&first.challenge(), None, &mut rng);
        let second = Challenger::new(&mut rng);
        assert_eq!(
            second.complete(&old_ar, &reg, None).unwrap_err(),
            HandshakeError::Rejected(Rejection::NonceMismatch)
        );
    }

    #[test]
    fn tampered_transcript_and_identity() {
        let (mut rng, prover, reg) = setup();
        let ch = Challenger::new(&mut rng);
        let (mut ar, _) = prover.respond(&ch.challenge(), None, &mut rng);
        let other = KeyPair::generate(&mut rng);
        assert_eq!(
            ch.complete(&ar, &reg, Some(&other.public())).unwrap_err(),
            HandshakeError::IdentityMismatch
        );
        ar.wrapped_key[0] ^= 1;
        assert_eq!(ch.complete(&ar, &reg, None).unwrap_err(), HandshakeError::BadTranscript);
    }

    #[test]
    fn records_reject_tamper_replay_and_reflection() {
        let (mut rng, prover, reg) = setup();
        let ch = Challenger::new(&mut rng);
        let (ar, mut p_chan) = prover.respond(&ch.challenge(), None, &mut rng);
        let mut v = ch.complete(&ar, &reg, None).unwrap().channel;

        let rec = v.seal(&msg("a")).unwrap();
        let mut bad = rec.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert_eq!(p_chan.open(&bad), Err(ChannelError::Decrypt));
        p_chan.open(&rec).unwrap();
        assert_eq!(p_chan.open(&rec), Err(ChannelError::OutOfOrder { expected: 1, got: 0 }));

        // a record cannot be bounced back to its sender
        let rec = v.seal(&msg("b")).unwrap();
        let mut v2 = ch.complete(&ar, &reg, None).unwrap().channel;
        v2.recv_seq = 1;
        assert_eq!(v2.open(&rec), Err(ChannelError::Decrypt));
        assert_eq!(v.open(&[0; 4]), Err(ChannelError::Truncated));
    }
}
