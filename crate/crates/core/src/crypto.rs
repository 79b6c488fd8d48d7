//! Cryptographic building blocks used by every entity in the grid.
//!
//! * AES-128-GCM authenticated encryption with counter-managed IVs
//! * ECDSA over P-256 for enclave and attestation signatures
//! * ECDH over P-256 for the enclave-to-enclave key agreement
//! * HKDF-SHA256 to turn shared secrets into 128-bit session keys
//! * an ECIES-style hybrid encryption used to address the gateway enclave

use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use hkdf::Hkdf;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToEncodedPoint;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Deterministic CSPRNG used throughout the simulator.
pub type SimRng = rand_chacha::ChaCha20Rng;

pub const KEY_LEN: usize = 16;
pub const IV_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// SEC1 uncompressed encoding of a P-256 point.
pub const POINT_LEN: usize = 65;
pub const SIGNATURE_LEN: usize = 64;

/// Name of the key-agreement group, written into trace headers.
pub const DH_GROUP: &str = "ECDH P-256 (secp256r1)";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    /// Tag did not verify. Deliberately carries no detail.
    #[error("authentication failure")]
    AuthFailure,
    #[error("IV counter exhausted; rotate the key")]
    IvExhausted,
    #[error("peer share is not a valid group element")]
    InvalidGroupElement,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}

/// A 128-bit symmetric key.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; KEY_LEN]);

impl SymKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        SymKey(bytes)
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SymKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::Malformed("key length"))?;
        Ok(SymKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Short non-secret identifier, used by the IV audit.
    pub fn fingerprint(&self) -> [u8; 8] {
        let digest = Sha256::digest(self.0);
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymKey({})", hex::encode(self.fingerprint()))
    }
}

/// Output of authenticated encryption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherEnvelope {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
    pub aad: Vec<u8>,
}

impl CipherEnvelope {
    /// `iv ‖ ct_len (u32 BE) ‖ ct ‖ tag`. The aad travels out of band.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IV_LEN + 4 + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Parses one length-prefixed envelope and returns the unread remainder.
    pub fn decode_prefix<'a>(bytes: &'a [u8], aad: &[u8]) -> Result<(Self, &'a [u8]), CryptoError> {
        if bytes.len() < IV_LEN + 4 {
            return Err(CryptoError::Malformed("envelope header"));
        }
        let iv: [u8; IV_LEN] = bytes[..IV_LEN].try_into().unwrap();
        let ct_len = u32::from_be_bytes(bytes[IV_LEN..IV_LEN + 4].try_into().unwrap()) as usize;
        let rest = &bytes[IV_LEN + 4..];
        if rest.len() < ct_len + TAG_LEN {
            return Err(CryptoError::Malformed("envelope body"));
        }
        let ciphertext = rest[..ct_len].to_vec();
        let tag: [u8; TAG_LEN] = rest[ct_len..ct_len + TAG_LEN].try_into().unwrap();
        Ok((
            CipherEnvelope { iv, ciphertext, tag, aad: aad.to_vec() },
            &rest[ct_len + TAG_LEN..],
        ))
    }

    pub fn decode(bytes: &[u8], aad: &[u8]) -> Result<Self, CryptoError> {
        let (env, rest) = Self::decode_prefix(bytes, aad)?;
        if !rest.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes after envelope"));
        }
        Ok(env)
    }

    /// Fixed-length form `iv ‖ ct ‖ tag` for bodies whose plaintext size is known.
    pub fn encode_fixed(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IV_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn decode_fixed(bytes: &[u8], ct_len: usize, aad: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != IV_LEN + ct_len + TAG_LEN {
            return Err(CryptoError::Malformed("fixed envelope length"));
        }
        Ok(CipherEnvelope {
            iv: bytes[..IV_LEN].try_into().unwrap(),
            ciphertext: bytes[IV_LEN..IV_LEN + ct_len].to_vec(),
            tag: bytes[IV_LEN + ct_len..].try_into().unwrap(),
            aad: aad.to_vec(),
        })
    }
}

/// Per-key IV source. The 96-bit IV is `prefix (u32 BE) ‖ counter (u64 BE)`.
///
/// Each party encrypting under a shared key owns a distinct prefix, and an
/// enclave draws a fresh random prefix every time it is instantiated so that
/// restarting from sealed (possibly stale) state never replays a counter.
/// Counter value 0 is reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IvSequence {
    prefix: u32,
    next: u64,
}

impl IvSequence {
    pub fn new(prefix: u32) -> Self {
        IvSequence { prefix, next: 1 }
    }

    pub fn resume(prefix: u32, next: u64) -> Self {
        IvSequence { prefix, next: next.max(1) }
    }

    pub fn next_iv(&mut self) -> Result<[u8; IV_LEN], CryptoError> {
        if self.next == 0 {
            return Err(CryptoError::IvExhausted);
        }
        let mut iv = [0u8; IV_LEN];
        iv[..4].copy_from_slice(&self.prefix.to_be_bytes());
        iv[4..].copy_from_slice(&self.next.to_be_bytes());
        // wraps to the reserved 0 after u64::MAX, which marks exhaustion
        self.next = self.next.wrapping_add(1);
        Ok(iv)
    }

    pub fn prefix(&self) -> u32 {
        self.prefix
    }

    pub fn counter(&self) -> u64 {
        self.next
    }
}

/// A key together with the only IV sequence allowed to encrypt under it
/// from this party.
#[derive(Clone, Debug)]
pub struct AeKey {
    key: SymKey,
    ivs: IvSequence,
}

impl AeKey {
    pub fn new(key: SymKey, iv_prefix: u32) -> Self {
        AeKey { key, ivs: IvSequence::new(iv_prefix) }
    }

    pub fn with_sequence(key: SymKey, ivs: IvSequence) -> Self {
        AeKey { key, ivs }
    }

    pub fn key(&self) -> &SymKey {
        &self.key
    }

    pub fn sequence(&self) -> &IvSequence {
        &self.ivs
    }

    pub fn encrypt(&mut self, plaintext: &[u8], aad: &[u8]) -> Result<CipherEnvelope, CryptoError> {
        let iv = self.ivs.next_iv()?;
        Ok(ae_encrypt_with_iv(&self.key, iv, plaintext, aad))
    }

    pub fn decrypt(&self, env: &CipherEnvelope, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        ae_decrypt(&self.key, env, aad)
    }
}

/// Encrypts under an explicit IV. Callers own IV uniqueness; every call is
/// reported to the [`iv_audit`] recorder.
pub fn ae_encrypt_with_iv(key: &SymKey, iv: [u8; IV_LEN], plaintext: &[u8], aad: &[u8]) -> CipherEnvelope {
    iv_audit::record(key, &iv);
    let cipher = Aes128Gcm::new(key.as_bytes().into());
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(&Nonce::from(iv), aad, &mut buf)
        .expect("AES-GCM plaintext length within limits");
    CipherEnvelope { iv, ciphertext: buf, tag: tag.into(), aad: aad.to_vec() }
}

/// Returns the plaintext iff the tag verifies under `(key, iv, ciphertext, aad)`.
pub fn ae_decrypt(key: &SymKey, env: &CipherEnvelope, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes128Gcm::new(key.as_bytes().into());
    let mut buf = env.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(&Nonce::from(env.iv), aad, &mut buf, &Tag::from(env.tag))
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(buf)
}

/// ECDSA P-256 verification key, SEC1 uncompressed on the wire.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerifyKey(VerifyingKey);

impl VerifyKey {
    pub fn to_bytes(&self) -> [u8; POINT_LEN] {
        let point = self.0.to_encoded_point(false);
        point.as_bytes().try_into().expect("uncompressed P-256 point")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        VerifyingKey::from_sec1_bytes(bytes)
            .map(VerifyKey)
            .map_err(|_| CryptoError::InvalidGroupElement)
    }
}

impl fmt::Debug for VerifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifyKey({})", hex::encode(&self.to_bytes()[1..9]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }
}

#[derive(Clone)]
pub struct SignKeypair {
    secret: SigningKey,
    public: VerifyKey,
}

impl SignKeypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = SigningKey::random(rng);
        let public = VerifyKey(*secret.verifying_key());
        SignKeypair { secret, public }
    }

    pub fn public(&self) -> VerifyKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        let sig: p256::ecdsa::Signature = self.secret.sign(message);
        Signature(sig.to_bytes().into())
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes().into()
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let secret = SigningKey::from_slice(bytes).map_err(|_| CryptoError::Malformed("signing key"))?;
        let public = VerifyKey(*secret.verifying_key());
        Ok(SignKeypair { secret, public })
    }
}

impl fmt::Debug for SignKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignKeypair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// False for any malformed signature encoding; never panics.
pub fn verify(pk: &VerifyKey, message: &[u8], sig: &[u8]) -> bool {
    let Ok(sig) = p256::ecdsa::Signature::from_slice(sig) else {
        return false;
    };
    pk.0.verify(message, &sig).is_ok()
}

/// Secret exponent of one Diffie-Hellman run.
pub struct DhSecret(p256::NonZeroScalar);

impl fmt::Debug for DhSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DhSecret(..)")
    }
}

/// Public group element `g^x`, SEC1 uncompressed.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DhShare(pub [u8; POINT_LEN]);

impl fmt::Debug for DhShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DhShare({}..)", hex::encode(&self.0[1..9]))
    }
}

impl DhShare {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; POINT_LEN] = bytes.try_into().map_err(|_| CryptoError::InvalidGroupElement)?;
        Ok(DhShare(arr))
    }
}

/// `g^ab`: the affine x-coordinate of the shared point.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret([u8; 32]);

impl SharedSecret {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SharedSecret(bytes)
    }
}

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

pub fn dh_generate<R: RngCore + CryptoRng>(rng: &mut R) -> (DhSecret, DhShare) {
    let secret = p256::NonZeroScalar::random(rng);
    let public = p256::PublicKey::from_secret_scalar(&secret);
    let share = DhShare(public.to_encoded_point(false).as_bytes().try_into().expect("uncompressed point"));
    (DhSecret(secret), share)
}

/// Rejects the identity, off-curve points and malformed encodings.
pub fn dh_combine(secret: &DhSecret, peer: &DhShare) -> Result<SharedSecret, CryptoError> {
    let peer = p256::PublicKey::from_sec1_bytes(&peer.0).map_err(|_| CryptoError::InvalidGroupElement)?;
    let shared = p256::ecdh::diffie_hellman(secret.0, peer.as_affine());
    let mut out = [0u8; 32];
    out.copy_from_slice(shared.raw_secret_bytes());
    Ok(SharedSecret(out))
}

const KDF_SALT: &[u8] = b"secgrid/kdf/v1";

/// HKDF-SHA256 expansion of arbitrary input keying material to a 128-bit key.
pub fn derive_key(ikm: &[u8], context: &[u8]) -> SymKey {
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), ikm);
    let mut okm = [0u8; KEY_LEN];
    hk.expand(context, &mut okm).expect("16 bytes is a valid HKDF length");
    SymKey(okm)
}

pub fn kdf_session(ss: &SharedSecret, context: &[u8]) -> SymKey {
    derive_key(ss.as_bytes(), context)
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Static key pair for the hybrid public-key encryption.
pub struct PkeKeypair {
    secret: p256::SecretKey,
    public: [u8; POINT_LEN],
}

impl PkeKeypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = p256::SecretKey::random(rng);
        let public = secret.public_key().to_encoded_point(false).as_bytes().try_into().expect("uncompressed point");
        PkeKeypair { secret, public }
    }

    pub fn public(&self) -> [u8; POINT_LEN] {
        self.public
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes().into()
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let secret = p256::SecretKey::from_slice(bytes).map_err(|_| CryptoError::Malformed("pke key"))?;
        let public = secret.public_key().to_encoded_point(false).as_bytes().try_into().expect("uncompressed point");
        Ok(PkeKeypair { secret, public })
    }
}

impl fmt::Debug for PkeKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PkeKeypair({}..)", hex::encode(&self.public[1..9]))
    }
}

fn pke_key(shared: &SharedSecret, eph: &[u8; POINT_LEN], recipient: &[u8; POINT_LEN]) -> SymKey {
    let mut info = Vec::with_capacity(16 + 2 * POINT_LEN);
    info.extend_from_slice(b"secgrid/pke/v1");
    info.extend_from_slice(eph);
    info.extend_from_slice(recipient);
    derive_key(shared.as_bytes(), &info)
}

/// ECIES: `ephemeral share (65) ‖ envelope`. A fresh key per message, so the
/// IV counter always starts at 1.
pub fn pke_encrypt<R: RngCore + CryptoRng>(
    recipient: &[u8; POINT_LEN],
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    let (eph_secret, eph_share) = dh_generate(rng);
    let shared = dh_combine(&eph_secret, &DhShare(*recipient))?;
    let mut key = AeKey::new(pke_key(&shared, &eph_share.0, recipient), 0);
    let env = key.encrypt(plaintext, b"secgrid/pke/v1")?;
    let mut out = eph_share.0.to_vec();
    out.extend_from_slice(&env.encode());
    Ok(out)
}

pub fn pke_decrypt(keypair: &PkeKeypair, ciphertext: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ciphertext.len() < POINT_LEN {
        return Err(CryptoError::Malformed("pke ciphertext"));
    }
    let eph = DhShare::from_slice(&ciphertext[..POINT_LEN])?;
    let eph_pk = p256::PublicKey::from_sec1_bytes(&eph.0).map_err(|_| CryptoError::InvalidGroupElement)?;
    let shared = p256::ecdh::diffie_hellman(keypair.secret.to_nonzero_scalar(), eph_pk.as_affine());
    let mut ss = [0u8; 32];
    ss.copy_from_slice(shared.raw_secret_bytes());
    let key = pke_key(&SharedSecret(ss), &eph.0, &keypair.public);
    let env = CipherEnvelope::decode(&ciphertext[POINT_LEN..], b"secgrid/pke/v1")?;
    ae_decrypt(&key, &env, b"secgrid/pke/v1")
}

/// Thread-local recorder of every `(key, iv)` pair used for encryption.
///
/// Off by default. Tests switch it on around a simulation run and assert
/// that no pair ever repeats.
pub mod iv_audit {
    use std::cell::RefCell;
    use std::collections::HashSet;

    use super::{SymKey, IV_LEN};

    #[derive(Debug, Default, Clone, PartialEq, Eq)]
    pub struct AuditReport {
        pub encryptions: u64,
        pub duplicates: u64,
    }

    #[derive(Default)]
    struct Recorder {
        seen: HashSet<([u8; 8], [u8; IV_LEN])>,
        report: AuditReport,
    }

    thread_local! {
        static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
    }

    pub fn start() {
        RECORDER.with(|r| *r.borrow_mut() = Some(Recorder::default()));
    }

    pub fn stop() -> AuditReport {
        RECORDER.with(|r| r.borrow_mut().take().map(|rec| rec.report).unwrap_or_default())
    }

    pub(super) fn record(key: &SymKey, iv: &[u8; IV_LEN]) {
        RECORDER.with(|r| {
            if let Some(rec) = r.borrow_mut().as_mut() {
                rec.report.encryptions += 1;
                if !rec.seen.insert((key.fingerprint(), *iv)) {
                    rec.report.duplicates += 1;
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> SimRng {
        SimRng::seed_from_u64(7)
    }

    #[test]
    fn empty_plaintext_round_trip() {
        let mut key = AeKey::new(SymKey::generate(&mut rng()), 1);
        let env = key.encrypt(b"", b"").unwrap();
        assert!(env.ciphertext.is_empty());
        assert_eq!(env.tag.len(), 16);
        assert_eq!(key.decrypt(&env, b"").unwrap(), b"");
    }

    #[test]
    fn wrong_aad_is_rejected() {
        let mut key = AeKey::new(SymKey::generate(&mut rng()), 1);
        let env = key.encrypt(b"reading", b"meter/1").unwrap();
        assert_eq!(key.decrypt(&env, b"meter/2"), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn wrong_key_is_rejected() {
        let mut r = rng();
        let mut key = AeKey::new(SymKey::generate(&mut r), 1);
        let other = SymKey::generate(&mut r);
        let env = key.encrypt(b"reading", b"").unwrap();
        assert_eq!(ae_decrypt(&other, &env, b""), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn iv_counter_starts_at_one_and_exhausts() {
        let mut seq = IvSequence::new(0xAABBCCDD);
        let iv = seq.next_iv().unwrap();
        assert_eq!(iv, [0xAA, 0xBB, 0xCC, 0xDD, 0, 0, 0, 0, 0, 0, 0, 1]);

        let mut seq = IvSequence::resume(0, u64::MAX);
        assert!(seq.next_iv().is_ok());
        assert_eq!(seq.next_iv(), Err(CryptoError::IvExhausted));
    }

    #[test]
    fn envelope_encoding_round_trip() {
        let mut key = AeKey::new(SymKey::generate(&mut rng()), 3);
        let env = key.encrypt(b"hello grid", b"x").unwrap();
        let bytes = env.encode();
        let (back, rest) = CipherEnvelope::decode_prefix(&bytes, b"x").unwrap();
        assert!(rest.is_empty());
        assert_eq!(back, env);
        assert!(CipherEnvelope::decode(&bytes[..bytes.len() - 1], b"x").is_err());
    }

    #[test]
    fn signature_checks() {
        let mut r = rng();
        let kp1 = SignKeypair::generate(&mut r);
        let kp2 = SignKeypair::generate(&mut r);
        let sig = kp1.sign(b"time=1000");
        assert!(verify(&kp1.public(), b"time=1000", &sig.0));
        assert!(!verify(&kp1.public(), b"time=1001", &sig.0));
        assert!(!verify(&kp2.public(), b"time=1000", &sig.0));
        assert!(!verify(&kp1.public(), b"time=1000", &sig.0[..10]));
        assert!(!verify(&kp1.public(), b"time=1000", &[0u8; 64]));
    }

    #[test]
    fn signing_key_survives_serialization() {
        let kp = SignKeypair::generate(&mut rng());
        let back = SignKeypair::from_secret_bytes(&kp.secret_bytes()).unwrap();
        assert_eq!(back.public(), kp.public());
        let pk = VerifyKey::from_bytes(&kp.public().to_bytes()).unwrap();
        assert_eq!(pk, kp.public());
    }

    #[test]
    fn dh_rejects_invalid_points() {
        let mut r = rng();
        let (a, _) = dh_generate(&mut r);
        // identity encoding
        assert_eq!(dh_combine(&a, &DhShare([0u8; POINT_LEN])), Err(CryptoError::InvalidGroupElement));
        // (1, 1) is not on the curve
        let mut off_curve = [0u8; POINT_LEN];
        off_curve[0] = 0x04;
        off_curve[32] = 1;
        off_curve[64] = 1;
        assert_eq!(dh_combine(&a, &DhShare(off_curve)), Err(CryptoError::InvalidGroupElement));
        assert_eq!(DhShare::from_slice(&[0u8]), Err(CryptoError::InvalidGroupElement));
    }

    #[test]
    fn kdf_is_deterministic_and_context_bound() {
        let mut r = rng();
        let (a, ga) = dh_generate(&mut r);
        let (b, gb) = dh_generate(&mut r);
        let ss = dh_combine(&a, &gb).unwrap();
        assert_eq!(ss, dh_combine(&b, &ga).unwrap());
        let k1 = kdf_session(&ss, b"gw->cc");
        assert_eq!(k1, kdf_session(&ss, b"gw->cc"));
        assert_ne!(k1, kdf_session(&ss, b"cc->gw"));
        assert_eq!(k1.as_bytes().len(), 16);
    }

    #[test]
    fn pke_round_trip_and_tamper() {
        let mut r = rng();
        let kp = PkeKeypair::generate(&mut r);
        let ct = pke_encrypt(&kp.public(), b"init message", &mut r).unwrap();
        assert_eq!(pke_decrypt(&kp, &ct).unwrap(), b"init message");
        let mut bad = ct.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(pke_decrypt(&kp, &bad).is_err());
        let other = PkeKeypair::generate(&mut r);
        assert!(pke_decrypt(&other, &ct).is_err());
    }

    #[test]
    fn iv_audit_counts_duplicates() {
        let key = SymKey::from_bytes([1; 16]);
        iv_audit::start();
        ae_encrypt_with_iv(&key, [0; 12], b"a", b"");
        ae_encrypt_with_iv(&key, [0; 12], b"b", b"");
        ae_encrypt_with_iv(&key, [1; 12], b"c", b"");
        let report = iv_audit::stop();
        assert_eq!(report, iv_audit::AuditReport { encryptions: 3, duplicates: 1 });
    }
}
