//! Keys, signatures, nonces, the AES-128-GCM session channel primitives and a
//! mock TEE attestation scheme in which a per-host "platform key" plays the
//! role of the CPU attestation key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce as GcmNonce};
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use crate::model::{GeoPoint, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("authenticated decryption failed")]
    Decrypt,
}

fn hex_array<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let raw = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
    let got = raw.len();
    raw.try_into().map_err(|_| CryptoError::Length { expected: N, got })
}

macro_rules! hex_newtype {
    ($name:ident, $n:expr) => {
        impl $name {
            pub const LEN: usize = $n;

            pub fn from_bytes(bytes: [u8; $n]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; $n] {
                &self.0
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                hex_array::<$n>(s).map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({}..)"), hex::encode(&self.0[..4]))
            }
        }
    };
}

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; 32]);
hex_newtype!(PublicKey, 32);

/// Ed25519 signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; 64]);
hex_newtype!(Signature, 64);

/// 16 random bytes, single use per protocol exchange.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce([u8; 16]);
hex_newtype!(Nonce, 16);

/// SHA-256 digest of a declared code identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeMeasurement([u8; 32]);
hex_newtype!(CodeMeasurement, 32);

/// X25519 public value used in the channel key exchange.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ExchangeKey([u8; 32]);
hex_newtype!(ExchangeKey, 32);

impl Nonce {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    /// Deterministic nonce bound to a parent nonce and a label.
    pub fn derive(parent: &Nonce, label: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"dgate-nonce");
        h.update(parent.0);
        h.update(label);
        let d = h.finalize();
        let mut b = [0u8; 16];
        b.copy_from_slice(&d[..16]);
        Self(b)
    }
}

impl CodeMeasurement {
    pub fn of(code_identity: &[u8]) -> Self {
        Self(Sha256::digest(code_identity).into())
    }
}

impl PublicKey {
    pub fn verify(&self, payload: &[u8], sig: &Signature) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        vk.verify(payload, &ed25519_dalek::Signature::from_bytes(&sig.0)).is_ok()
    }
}

/// Signing key pair. The secret half never leaves this type.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self { signing: SigningKey::generate(rng) }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        Signature(self.signing.sign(payload).to_bytes())
    }

    /// Secret-keyed PRF output for `context`; reveals nothing about the key.
    pub fn derive_seed(&self, context: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"dgate-derive");
        h.update(self.signing.to_bytes());
        h.update(context);
        h.finalize().into()
    }
}

pub fn sign(payload: &[u8], key: &KeyPair) -> Signature {
    key.sign(payload)
}

pub fn verify(payload: &[u8], signature: &Signature, public: &PublicKey) -> bool {
    public.verify(payload, signature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TeeKind {
    #[serde(rename = "sgx-like")]
    SgxLike,
    #[serde(rename = "sev-like")]
    SevLike,
    #[serde(rename = "none")]
    None,
}

impl TeeKind {
    fn tag(self) -> u8 {
        match self {
            TeeKind::SgxLike => 1,
            TeeKind::SevLike => 2,
            TeeKind::None => 0,
        }
    }
}

/// Platform-signed statement binding a code measurement, a challenge nonce
/// and the attested party's public key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub code_measurement: CodeMeasurement,
    pub nonce: Nonce,
    pub key_binding: PublicKey,
    pub tee_kind: TeeKind,
    pub platform_key: PublicKey,
    pub signature: Signature,
}

impl AttestationReport {
    fn signed_bytes(
        code: &CodeMeasurement,
        nonce: &Nonce,
        key_binding: &PublicKey,
        tee_kind: TeeKind,
    ) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 16 + 32 + 1);
        out.extend_from_slice(&code.0);
        out.extend_from_slice(&nonce.0);
        out.extend_from_slice(&key_binding.0);
        out.push(tee_kind.tag());
        out
    }
}

pub fn attest(
    code_identity: &[u8],
    nonce: Nonce,
    key_binding: PublicKey,
    tee_kind: TeeKind,
    platform: &KeyPair,
) -> AttestationReport {
    let code_measurement = CodeMeasurement::of(code_identity);
    let msg = AttestationReport::signed_bytes(&code_measurement, &nonce, &key_binding, tee_kind);
    AttestationReport {
        code_measurement,
        nonce,
        key_binding,
        tee_kind,
        platform_key: platform.public(),
        signature: platform.sign(&msg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum Rejection {
    #[error("code measurement is not known")]
    CodeMismatch,
    #[error("nonce does not match the challenge")]
    NonceMismatch,
    #[error("platform key is not trusted")]
    UntrustedPlatform,
    #[error("attestation signature is invalid")]
    BadSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerificationOutcome {
    Accepted,
    Rejected(Rejection),
}

impl VerificationOutcome {
    pub fn into_result(self) -> Result<(), Rejection> {
        match self {
            VerificationOutcome::Accepted => Ok(()),
            VerificationOutcome::Rejected(r) => Err(r),
        }
    }
}

pub fn verify_ar(
    ar: &AttestationReport,
    expected_nonce: &Nonce,
    registry: &PkiRegistry,
) -> VerificationOutcome {
    let msg = AttestationReport::signed_bytes(
        &ar.code_measurement,
        &ar.nonce,
        &ar.key_binding,
        ar.tee_kind,
    );
    let outcome = if !ar.platform_key.verify(&msg, &ar.signature) {
        Rejection::BadSignature
    } else if !registry.trusted_platform_keys.contains(&ar.platform_key) {
        Rejection::UntrustedPlatform
    } else if !registry.known_code_measurements.contains(&ar.code_measurement) {
        Rejection::CodeMismatch
    } else if ar.nonce != *expected_nonce {
        Rejection::NonceMismatch
    } else {
        return VerificationOutcome::Accepted;
    };
    VerificationOutcome::Rejected(outcome)
}

/// Where a geoclient can be reached: UDP probe address and control-channel address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub probe: String,
    pub control: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub public_key: PublicKey,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PkiRegistry {
    #[serde(default)]
    pub trusted_platform_keys: BTreeSet<PublicKey>,
    #[serde(default)]
    pub known_code_measurements: BTreeSet<CodeMeasurement>,
    #[serde(default)]
    pub geoclient_directory: BTreeMap<NodeId, DirectoryEntry>,
}

impl PkiRegistry {
    pub fn trust_platform(&mut self, key: PublicKey) {
        self.trusted_platform_keys.insert(key);
    }

    pub fn allow_code(&mut self, code_identity: &[u8]) {
        self.known_code_measurements.insert(CodeMeasurement::of(code_identity));
    }

    pub fn register_geoclient(&mut self, id: NodeId, entry: DirectoryEntry) {
        self.geoclient_directory.insert(id, entry);
    }

    pub fn geoclient(&self, id: &NodeId) -> Option<&DirectoryEntry> {
        self.geoclient_directory.get(id)
    }

    pub fn location_of(&self, id: &NodeId) -> Option<GeoPoint> {
        self.geoclient_directory.get(id).and_then(|e| e.location)
    }
}

/// AES-128 session key.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey([u8; 16]);

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

impl SessionKey {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 16];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    fn cipher(&self) -> Aes128Gcm {
        Aes128Gcm::new_from_slice(&self.0).expect("16-byte key")
    }

    pub fn seal(&self, nonce: [u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        self.cipher()
            .encrypt(GcmNonce::from_slice(&nonce), Payload { msg: plaintext, aad })
            .expect("aes-gcm encryption is infallible for in-memory buffers")
    }

    pub fn open(&self, nonce: [u8; 12], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        self.cipher()
            .decrypt(GcmNonce::from_slice(&nonce), Payload { msg: ciphertext, aad })
            .map_err(|_| CryptoError::Decrypt)
    }
}

/// One side of an ephemeral X25519 exchange used to wrap the session key.
pub struct KeyExchange {
    secret: StaticSecret,
}

impl KeyExchange {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self { secret: StaticSecret::from(seed) }
    }

    pub fn public(&self) -> ExchangeKey {
        ExchangeKey(XPublic::from(&self.secret).to_bytes())
    }

    fn kek(&self, peer: &ExchangeKey, salt: &Nonce) -> SessionKey {
        let shared = self.secret.diffie_hellman(&XPublic::from(peer.0));
        let hk = Hkdf::<Sha256>::new(Some(&salt.0), shared.as_bytes());
        let mut okm = [0u8; 16];
        hk.expand(b"dgate key wrap", &mut okm).expect("16 bytes is a valid HKDF length");
        SessionKey(okm)
    }

    /// Encrypts `key` for the holder of `peer`'s exchange secret.
    pub fn wrap(&self, peer: &ExchangeKey, salt: &Nonce, key: &SessionKey) -> Vec<u8> {
        self.kek(peer, salt).seal([0u8; 12], b"wrap", &key.0)
    }

    pub fn unwrap(&self, peer: &ExchangeKey, salt: &Nonce, wrapped: &[u8]) -> Result<SessionKey, CryptoError> {
        let raw = self.kek(peer, salt).open([0u8; 12], b"wrap", wrapped)?;
        let got = raw.len();
        let k: [u8; 16] = raw.try_into().map_err(|_| CryptoError::Length { expected: 16, got })?;
        Ok(SessionKey(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const CODE: &[u8] = b"dgate-processor/1";

    fn setup() -> (ChaCha20Rng, KeyPair, KeyPair, PkiRegistry) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let platform = KeyPair::generate(&mut rng);
        let enclave = KeyPair::generate(&mut rng);
        let mut reg = PkiRegistry::default();
        reg.trust_platform(platform.public());
        reg.allow_code(CODE);
        (rng, platform, enclave, reg)
    }

    #[test]
    fn attestation_round_trip() {
        let (mut rng, platform, enclave, reg) = setup();
        let n = Nonce::random(&mut rng);
        let ar = attest(CODE, n, enclave.public(), TeeKind::SgxLike, &platform);
        assert_eq!(verify_ar(&ar, &n, &reg), VerificationOutcome::Accepted);
    }

    #[test]
    fn unknown_code_rejected() {
        let (mut rng, platform, enclave, reg) = setup();
        let n = Nonce::random(&mut rng);
        let ar = attest(b"evil", n, enclave.public(), TeeKind::SgxLike, &platform);
        assert_eq!(
            verify_ar(&ar, &n, &reg),
            VerificationOutcome::Rejected(Rejection::CodeMismatch)
        );
    }

    #[test]
    fn replayed_nonce_rejected() {
        let (mut rng, platform, enclave, reg) = setup();
        let n1 = Nonce::random(&mut rng);
        let n2 = Nonce::random(&mut rng);
        let ar = attest(CODE, n1, enclave.public(), TeeKind::SevLike, &platform);
        assert_eq!(
            verify_ar(&ar, &n2, &reg),
            VerificationOutcome::Rejected(Rejection::NonceMismatch)
        );
    }

    #[test]
    fn flipped_signature_byte() {
        let (mut rng, platform, enclave, reg) = setup();
        let n = Nonce::random(&mut rng);
        let mut ar = attest(CODE, n, enclave.public(), TeeKind::SgxLike, &platform);
        ar.signature.0[5] ^= 0x01;
        assert_eq!(
            verify_ar(&ar, &n, &reg),
            VerificationOutcome::Rejected(Rejection::BadSignature)
        );
    }

    #[test]
    fn tee_kind_is_covered_by_signature() {
        let (mut rng, platform, enclave, reg) = setup();
        let n = Nonce::random(&mut rng);
        let mut ar = attest(CODE, n, enclave.public(), TeeKind::SgxLike, &platform);
        ar.tee_kind = TeeKind::None;
        assert_eq!(
            verify_ar(&ar, &n, &reg),
            VerificationOutcome::Rejected(Rejection::BadSignature)
        );
    }

    #[test]
    fn untrusted_platform() {
        let (mut rng, _platform, enclave, reg) = setup();
        let rogue = KeyPair::generate(&mut rng);
        let n = Nonce::random(&mut rng);
        let ar = attest(CODE, n, enclave.public(), TeeKind::SgxLike, &rogue);
        assert_eq!(
            verify_ar(&ar, &n, &reg),
            VerificationOutcome::Rejected(Rejection::UntrustedPlatform)
        );
    }

    #[test]
    fn sign_verify() {
        let (mut rng, k, other, _) = setup();
        let payload = b"min delay 405us".to_vec();
        let sig = sign(&payload, &k);
        assert!(verify(&payload, &sig, &k.public()));
        assert!(!verify(&payload, &sig, &other.public()));
        let mut mutated = payload.clone();
        mutated[0] ^= 0x80;
        assert!(!verify(&mutated, &sig, &k.public()));
        let _ = Nonce::random(&mut rng);
    }

    #[test]
    fn key_wrap_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = KeyExchange::new(&mut rng);
        let b = KeyExchange::new(&mut rng);
        let salt = Nonce::random(&mut rng);
        let key = SessionKey::random(&mut rng);
        let wrapped = a.wrap(&b.public(), &salt, &key);
        assert_eq!(b.unwrap(&a.public(), &salt, &wrapped).unwrap(), key);
        let other_salt = Nonce::random(&mut rng);
        assert_eq!(b.unwrap(&a.public(), &other_salt, &wrapped), Err(CryptoError::Decrypt));
    }

    #[test]
    fn debug_does_not_leak_secret() {
        let k = KeyPair::from_seed([7u8; 32]);
        let dbg = format!("{k:?}");
        assert!(!dbg.contains(&hex::encode([7u8; 32])));
    }

    #[test]
    fn registry_toml_round_trip() {
        let (_, platform, enclave, mut reg) = setup();
        reg.register_geoclient(
            NodeId::from_name("paris"),
            DirectoryEntry {
                public_key: enclave.public(),
                endpoint: Endpoint { probe: "127.0.0.1:47474".into(), control: "127.0.0.1:47475".into() },
                location: Some(GeoPoint::new(48.8566, 2.3522).unwrap()),
            },
        );
        let text = toml::to_string(&reg).unwrap();
        let back: PkiRegistry = toml::from_str(&text).unwrap();
        assert_eq!(back, reg);
        assert!(back.trusted_platform_keys.contains(&platform.public()));
    }
}
