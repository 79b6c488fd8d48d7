//! Software model of SGX-style enclaves.
//!
//! An [`Enclave`] has a measurement derived from its code identity, a seal key
//! derived from the machine's root seal secret and that measurement, and
//! access to a platform attestation signer. Nothing secret leaves an enclave
//! except as a [`CipherEnvelope`], [`Quote`] or [`SealedRecord`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use thiserror::Error;

use crate::crypto::{
    self, AeKey, CipherEnvelope, CryptoError, IvSequence, SignKeypair, Signature, SimRng, SymKey, VerifyKey,
    SIGNATURE_LEN,
};

/// Code identity of the gateway enclave program.
pub const GATEWAY_IDENTITY: &str = "secgrid/gateway-enclave/v1";
/// Code identity of the control enclave program.
pub const CONTROL_IDENTITY: &str = "secgrid/control-enclave/v1";

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn of(code_identity: &str) -> Self {
        let mut buf = b"secgrid/measurement/v1\0".to_vec();
        buf.extend_from_slice(code_identity.as_bytes());
        Measurement(crypto::sha256(&buf))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", hex::encode(&self.0[..8]))
    }
}

/// Local stand-in for the remote attestation service: a signer whose public
/// key every verifier is configured with.
pub struct AttestationService {
    key: SignKeypair,
}

impl AttestationService {
    pub fn new<R: RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        AttestationService { key: SignKeypair::generate(rng) }
    }

    pub fn root_public(&self) -> VerifyKey {
        self.key.public()
    }

    fn sign_report(&self, measurement: &Measurement, user_data: &[u8]) -> Signature {
        self.key.sign(&quote_body(measurement, user_data))
    }
}

impl fmt::Debug for AttestationService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationService").field("root", &self.key.public()).finish()
    }
}

fn quote_body(measurement: &Measurement, user_data: &[u8]) -> Vec<u8> {
    let mut buf = b"secgrid/quote/v1".to_vec();
    buf.extend_from_slice(&measurement.0);
    buf.extend_from_slice(user_data);
    buf
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub user_data: Vec<u8>,
    pub signature: Signature,
}

impl Quote {
    /// `measurement (32) ‖ user_data_len (u16 BE) ‖ user_data ‖ signature (64)`
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 2 + self.user_data.len() + SIGNATURE_LEN);
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&(self.user_data.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.user_data);
        out.extend_from_slice(&self.signature.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 34 + SIGNATURE_LEN {
            return None;
        }
        let measurement = Measurement(bytes[..32].try_into().ok()?);
        let len = u16::from_be_bytes([bytes[32], bytes[33]]) as usize;
        if bytes.len() != 34 + len + SIGNATURE_LEN {
            return None;
        }
        let user_data = bytes[34..34 + len].to_vec();
        let signature = Signature::from_slice(&bytes[34 + len..])?;
        Some(Quote { measurement, user_data, signature })
    }
}

/// True iff the attestation signature is valid and the quote's measurement
/// is the one the verifier expects.
pub fn verify_quote(quote: &Quote, expected: &Measurement, attestation_root: &VerifyKey) -> bool {
    quote.measurement == *expected
        && crypto::verify(attestation_root, &quote_body(&quote.measurement, &quote.user_data), &quote.signature.0)
}

/// A sealed blob: the label is authenticated as associated data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedRecord {
    pub label: String,
    pub envelope: CipherEnvelope,
}

impl SealedRecord {
    /// `label_len (u16 BE) ‖ label ‖ iv (12) ‖ ct_len (u32 BE) ‖ ct ‖ tag (16)`
    pub fn encode(&self) -> Vec<u8> {
        let label = self.label.as_bytes();
        let mut out = Vec::with_capacity(2 + label.len() + 32 + self.envelope.ciphertext.len());
        out.extend_from_slice(&(label.len() as u16).to_be_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&self.envelope.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 2 {
            return Err(CryptoError::Malformed("sealed record header"));
        }
        let len = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        if bytes.len() < 2 + len {
            return Err(CryptoError::Malformed("sealed record label"));
        }
        let label = std::str::from_utf8(&bytes[2..2 + len])
            .map_err(|_| CryptoError::Malformed("sealed record label utf-8"))?
            .to_string();
        let envelope = CipherEnvelope::decode(&bytes[2 + len..], label.as_bytes())?;
        Ok(SealedRecord { label, envelope })
    }
}

/// A running enclave instance.
pub struct Enclave {
    code_identity: String,
    measurement: Measurement,
    seal: AeKey,
    attestation: Arc<AttestationService>,
    instance_epoch: u32,
    ivs: IvSequence,
    rng: SimRng,
}

impl Enclave {
    /// Creates an enclave on a machine whose hardware root seal secret is
    /// `root_seal_secret`. The same identity on the same machine always
    /// re-derives the same seal key.
    pub fn create<R: RngCore>(
        code_identity: &str,
        root_seal_secret: &[u8],
        attestation: Arc<AttestationService>,
        entropy: &mut R,
    ) -> Self {
        let measurement = Measurement::of(code_identity);
        let seal_key = crypto::derive_key(root_seal_secret, &[b"secgrid/seal/v1".as_slice(), &measurement.0].concat());
        let mut seed = [0u8; 32];
        entropy.fill_bytes(&mut seed);
        let mut rng = SimRng::from_seed(seed);
        // zero is kept for parties outside any enclave
        let instance_epoch = (rng.next_u32() | 1).max(1);
        Enclave {
            code_identity: code_identity.to_string(),
            measurement,
            seal: AeKey::new(seal_key, instance_epoch),
            attestation,
            instance_epoch,
            ivs: IvSequence::new(instance_epoch),
            rng,
        }
    }

    pub fn code_identity(&self) -> &str {
        &self.code_identity
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    /// Random per-instance value used as the IV prefix for every key this
    /// instance encrypts under.
    pub fn instance_epoch(&self) -> u32 {
        self.instance_epoch
    }

    /// In-enclave randomness.
    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    pub fn get_quote(&self, user_data: &[u8]) -> Quote {
        Quote {
            measurement: self.measurement,
            user_data: user_data.to_vec(),
            signature: self.attestation.sign_report(&self.measurement, user_data),
        }
    }

    pub fn seal(&mut self, label: &str, plaintext: &[u8]) -> Result<SealedRecord, CryptoError> {
        let envelope = self.seal.encrypt(plaintext, label.as_bytes())?;
        Ok(SealedRecord { label: label.to_string(), envelope })
    }

    pub fn unseal(&self, record: &SealedRecord) -> Result<Vec<u8>, CryptoError> {
        self.seal.decrypt(&record.envelope, record.label.as_bytes())
    }

    /// A fresh key with this instance's IV prefix.
    pub fn new_ae_key(&self, key: SymKey) -> AeKey {
        AeKey::with_sequence(key, IvSequence::new(self.instance_epoch))
    }

    /// Encrypts under any key using the instance-wide IV counter. The counter
    /// lives only in enclave memory, so restoring a stale sealed record can
    /// never rewind it.
    pub fn encrypt(&mut self, key: &SymKey, plaintext: &[u8], aad: &[u8]) -> Result<CipherEnvelope, CryptoError> {
        let iv = self.ivs.next_iv()?;
        Ok(crypto::ae_encrypt_with_iv(key, iv, plaintext, aad))
    }
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("code_identity", &self.code_identity)
            .field("measurement", &self.measurement)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("no record stored under {0:?}")]
    NotFound(String),
    #[error("version {version} of {label:?} does not exist")]
    NoSuchVersion { label: String, version: usize },
    #[error("stored bytes under {0:?} do not parse")]
    Corrupt(String),
}

#[derive(Debug, Default)]
struct LabelHistory {
    versions: Vec<Vec<u8>>,
    current: Option<usize>,
}

#[derive(Debug, Default)]
struct StoreInner {
    records: BTreeMap<String, LabelHistory>,
    writes: Vec<(String, usize)>,
}

/// Untrusted persistent storage (the gateway's disk).
///
/// Every version ever written is retained so an adversary can serve any of
/// them. Cloning yields another handle to the same storage.
#[derive(Clone, Debug, Default)]
pub struct UntrustedStore {
    inner: Arc<Mutex<StoreInner>>,
}

impl UntrustedStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a new version and makes it current. Returns its index.
    pub fn store(&self, record: &SealedRecord) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let history = inner.records.entry(record.label.clone()).or_default();
        history.versions.push(record.encode());
        let version = history.versions.len() - 1;
        history.current = Some(version);
        inner.writes.push((record.label.clone(), version));
        version
    }

    pub fn load(&self, label: &str) -> Result<SealedRecord, StoreError> {
        let bytes = self.load_raw(label)?;
        SealedRecord::decode(&bytes).map_err(|_| StoreError::Corrupt(label.to_string()))
    }

    pub fn load_raw(&self, label: &str) -> Result<Vec<u8>, StoreError> {
        let inner = self.inner.lock().unwrap();
        inner
            .records
            .get(label)
            .and_then(|h| h.current.map(|v| h.versions[v].clone()))
            .ok_or_else(|| StoreError::NotFound(label.to_string()))
    }

    /// Serves an older (or any) version from now on.
    pub fn rollback(&self, label: &str, version: usize) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().unwrap();
        let history = inner.records.get_mut(label).ok_or_else(|| StoreError::NotFound(label.to_string()))?;
        if version >= history.versions.len() {
            return Err(StoreError::NoSuchVersion { label: label.to_string(), version });
        }
        history.current = Some(version);
        Ok(())
    }

    /// Overwrites the current bytes under a label without keeping history.
    pub fn overwrite_raw(&self, label: &str, bytes: Vec<u8>) {
        let mut inner = self.inner.lock().unwrap();
        let history = inner.records.entry(label.to_string()).or_default();
        history.versions.push(bytes);
        history.current = Some(history.versions.len() - 1);
    }

    pub fn remove(&self, label: &str) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(h) = inner.records.get_mut(label) {
            h.current = None;
        }
    }

    pub fn current_version(&self, label: &str) -> Option<usize> {
        self.inner.lock().unwrap().records.get(label).and_then(|h| h.current)
    }

    pub fn version_count(&self, label: &str) -> usize {
        self.inner.lock().unwrap().records.get(label).map_or(0, |h| h.versions.len())
    }

    pub fn labels(&self) -> Vec<String> {
        self.inner.lock().unwrap().records.keys().cloned().collect()
    }

    /// Writes performed since the given index of the write log.
    pub fn writes_since(&self, index: usize) -> Vec<(String, usize)> {
        let inner = self.inner.lock().unwrap();
        inner.writes.get(index..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn write_count(&self) -> usize {
        self.inner.lock().unwrap().writes.len()
    }

    /// Every byte ever persisted, for leakage scans.
    pub fn all_bytes(&self) -> Vec<Vec<u8>> {
        let inner = self.inner.lock().unwrap();
        inner.records.values().flat_map(|h| h.versions.iter().cloned()).collect()
    }
}
