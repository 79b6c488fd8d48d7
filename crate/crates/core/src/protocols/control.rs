//! Control enclave at the control centre.

use crate::crypto::{
    ae_decrypt, dh_combine, dh_generate, kdf_session, sha256, verify, CryptoError, DhShare, SharedSecret,
    SignKeypair, SymKey, VerifyKey, POINT_LEN, SIGNATURE_LEN,
};
use crate::enclave::{verify_quote, Enclave, Measurement, Quote, UntrustedStore};
use crate::functions::output::{decode_all, FunctionOutput};
use crate::keyring::{KeyringError, KeyringStorage, MerkleKeyStore};

use super::channel::{Arrival, ChannelEnd, Side, GW_TO_CC};
use super::wire::{self, put_short_bytes, Reader};
use super::{AlarmKind, MeterId, Node, Note, Outbox, Timing};

pub const KEY_OK: u8 = 0;
pub const KEY_VOID: u8 = 1;
pub const KEY_UNKNOWN: u8 = 2;
pub const KEY_INTEGRITY: u8 = 3;

pub const LINK_LABEL: &str = "cc/gw_link";

#[derive(Clone, Debug)]
pub struct ControlParams {
    pub gw_measurement: Measurement,
    pub attestation_root: VerifyKey,
    pub timing: Timing,
    /// Wall-clock time at tick 0, in milliseconds.
    pub wall_start_ms: u64,
}

struct Handshake {
    attest_digest: [u8; 32],
    reply: Vec<u8>,
    ss: SharedSecret,
    gw_sign: VerifyKey,
}

pub struct ControlCenter {
    enclave: Enclave,
    sign: SignKeypair,
    keyring: MerkleKeyStore,
    store: UntrustedStore,
    params: ControlParams,
    handshake: Option<Handshake>,
    answered_echo: Option<([u8; 32], Vec<u8>)>,
    link: Option<ChannelEnd>,
    outputs: Vec<(u64, Vec<FunctionOutput>)>,
}

impl ControlCenter {
    /// Builds the control enclave and its init-key keyring.
    pub fn new(mut enclave: Enclave, init_keys: &[(MeterId, SymKey)], params: ControlParams) -> Self {
        let sign = SignKeypair::generate(enclave.rng());
        let keyring = MerkleKeyStore::build(&mut enclave, init_keys).expect("unique meter ids");
        ControlCenter {
            enclave,
            sign,
            keyring,
            store: UntrustedStore::new(),
            params,
            handshake: None,
            answered_echo: None,
            link: None,
            outputs: Vec::new(),
        }
    }

    pub fn public_key(&self) -> VerifyKey {
        self.sign.public()
    }

    pub fn measurement(&self) -> Measurement {
        self.enclave.measurement()
    }

    pub fn wall_time(&self, now: u64) -> u64 {
        self.params.wall_start_ms + now
    }

    pub fn is_linked(&self) -> bool {
        self.link.is_some()
    }

    pub fn outputs(&self) -> &[(u64, Vec<FunctionOutput>)] {
        &self.outputs
    }

    pub fn store(&self) -> &UntrustedStore {
        &self.store
    }

    pub fn keyring_storage(&self) -> KeyringStorage {
        self.keyring.storage()
    }

    pub fn handle(&mut self, now: u64, src: Node, bytes: &[u8], out: &mut Outbox) {
        let tag = bytes.first().copied();
        let result = match (src, tag) {
            (Node::Gw, Some(wire::GW_ATTEST)) => self.on_gw_attest(now, bytes, out),
            (Node::Gw, Some(wire::TIME_ECHO)) => self.on_time_echo(now, bytes, out),
            (Node::Gw, Some(wire::GET_INIT_KEY | wire::WINDOW_FORWARD)) => self.on_channel(bytes, out),
            (Node::Gw, Some(wire::TIME_REQUEST)) => self.on_time_request(now, bytes, out),
            _ => Err(CryptoError::Malformed("unexpected message at control centre")),
        };
        if result.is_err() {
            out.alarm(AlarmKind::Tamper, None, "control centre rejected message");
        }
    }

    fn on_gw_attest(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let digest = sha256(bytes);
        if let Some(hs) = self.handshake.as_ref().filter(|hs| hs.attest_digest == digest) {
            out.send(Node::Gw, hs.reply.clone());
            return Ok(());
        }
        let quote = Quote::decode(&bytes[1..]).ok_or(CryptoError::Malformed("quote"))?;
        if !verify_quote(&quote, &self.params.gw_measurement, &self.params.attestation_root) {
            return Err(CryptoError::AuthFailure);
        }
        let mut r = Reader::new(&quote.user_data);
        let gw_sign = VerifyKey::from_bytes(r.bytes(POINT_LEN)?)?;
        let _gw_pke = r.bytes(POINT_LEN)?;
        let g_a = DhShare::from_slice(r.bytes(POINT_LEN)?)?;
        r.finish()?;

        let (b, g_b) = dh_generate(self.enclave.rng());
        let ss = dh_combine(&b, &g_a)?;
        let mut user_data = self.sign.public().to_bytes().to_vec();
        user_data.extend_from_slice(&g_b.0);
        let cc_quote = self.enclave.get_quote(&user_data).encode();
        let time = self.wall_time(now);

        let mut signed = wire::CC_ATTEST_CTX.to_vec();
        signed.extend_from_slice(&cc_quote);
        signed.extend_from_slice(&time.to_be_bytes());
        signed.extend_from_slice(&g_a.0);
        let sig = self.sign.sign(&signed);

        let mut reply = vec![wire::CC_ATTEST];
        put_short_bytes(&mut reply, &cc_quote);
        reply.extend_from_slice(&time.to_be_bytes());
        reply.extend_from_slice(&sig.0);
        self.handshake = Some(Handshake { attest_digest: digest, reply: reply.clone(), ss, gw_sign });
        out.send(Node::Gw, reply);
        Ok(())
    }

    fn on_time_echo(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let digest = sha256(bytes);
        if let Some((seen, ack)) = &self.answered_echo {
            if *seen == digest {
                out.send(Node::Gw, ack.clone());
                return Ok(());
            }
        }
        let Some(hs) = self.handshake.as_ref() else {
            out.ignore("time echo without handshake");
            return Ok(());
        };
        let mut r = Reader::new(&bytes[1..]);
        let env = r.envelope(wire::TIME_ECHO_AAD)?;
        let sig = r.bytes(SIGNATURE_LEN)?;
        r.finish()?;
        let mut signed = wire::TIME_ECHO_CTX.to_vec();
        signed.extend_from_slice(&env.encode());
        if !verify(&hs.gw_sign, &signed, sig) {
            return Err(CryptoError::AuthFailure);
        }
        let plain = ae_decrypt(&kdf_session(&hs.ss, GW_TO_CC), &env, wire::TIME_ECHO_AAD)?;
        let gw_time = u64::from_be_bytes(plain.as_slice().try_into().map_err(|_| CryptoError::Malformed("time"))?);
        let local = self.wall_time(now);
        if gw_time.abs_diff(local) > self.params.timing.time_tolerance {
            self.handshake = None;
            out.alarm(AlarmKind::Freshness, None, "gateway time outside tolerance");
            return Ok(());
        }

        let ss = hs.ss.clone();
        let gw_pk = hs.gw_sign;
        let mut sealed = ss.as_bytes().to_vec();
        sealed.extend_from_slice(&gw_pk.to_bytes());
        let record = self.enclave.seal(LINK_LABEL, &sealed)?;
        self.store.store(&record);
        let link = ChannelEnd::new(&ss, Side::Control);

        let env = self.enclave.encrypt(link.send_key(), &gw_time.to_be_bytes(), wire::INIT_ACK_AAD)?;
        let mut signed = wire::INIT_ACK_CTX.to_vec();
        signed.extend_from_slice(&env.encode());
        let sig = self.sign.sign(&signed);
        let mut ack = vec![wire::INIT_ACK];
        ack.extend_from_slice(&env.encode());
        ack.extend_from_slice(&sig.0);
        self.link = Some(link);
        self.answered_echo = Some((digest, ack.clone()));
        out.send(Node::Gw, ack);
        Ok(())
    }

    fn on_channel(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let link = self.link.as_mut().ok_or(CryptoError::Malformed("no gateway link"))?;
        let (tag, arrival) = link.open(bytes)?;
        let (seq, payload) = match arrival {
            Arrival::Fresh { seq, payload } => (seq, payload),
            Arrival::Gap { seq, payload, .. } => {
                out.alarm(AlarmKind::Freshness, None, "gateway channel sequence gap");
                (seq, payload)
            }
            Arrival::Duplicate { cached: Some(reply), .. } => {
                out.send(Node::Gw, reply);
                return Ok(());
            }
            Arrival::Duplicate { cached: None, .. } => {
                out.ignore("duplicate channel message");
                return Ok(());
            }
            Arrival::Stale { .. } => {
                out.alarm(AlarmKind::Replay, None, "stale gateway channel message");
                return Ok(());
            }
        };
        let (reply_tag, reply_payload) = match tag {
            wire::GET_INIT_KEY => {
                let mut r = Reader::new(&payload);
                let meter = r.u64()?;
                r.finish()?;
                let (status, key) = match self.keyring.get_and_void(&self.enclave, meter) {
                    Ok(key) => (KEY_OK, *key.as_bytes()),
                    Err(KeyringError::AlreadyVoid(_)) => {
                        out.alarm(AlarmKind::DoubleReg, Some(meter), "init key already used");
                        (KEY_VOID, [0; 16])
                    }
                    Err(KeyringError::NotFound(_)) => {
                        out.alarm(AlarmKind::Unknown, Some(meter), "no init key for meter");
                        (KEY_UNKNOWN, [0; 16])
                    }
                    Err(_) => {
                        out.alarm(AlarmKind::Rollback, Some(meter), "keyring integrity violation");
                        (KEY_INTEGRITY, [0; 16])
                    }
                };
                let mut p = seq.to_be_bytes().to_vec();
                p.extend_from_slice(&meter.to_be_bytes());
                p.push(status);
                p.extend_from_slice(&key);
                (wire::INIT_KEY_RESP, p)
            }
            _ => {
                let records = decode_all(&payload).ok_or(CryptoError::Malformed("function outputs"))?;
                self.outputs.push((seq, records.clone()));
                out.note(Note::OutputsAtCc { seq, records });
                (wire::WINDOW_ACK, seq.to_be_bytes().to_vec())
            }
        };
        let link = self.link.as_mut().expect("checked above");
        let (_, reply) = link.seal(&mut self.enclave, reply_tag, &reply_payload)?;
        link.remember_reply(seq, reply.clone());
        out.send(Node::Gw, reply);
        Ok(())
    }

    fn on_time_request(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let time = self.wall_time(now);
        let link = self.link.as_ref().ok_or(CryptoError::Malformed("no gateway link"))?;
        let mut r = Reader::new(&bytes[1..]);
        let env = r.envelope(wire::TIME_REQUEST_AAD)?;
        r.finish()?;
        let challenge = ae_decrypt(link.recv_key(), &env, wire::TIME_REQUEST_AAD)?;
        if challenge.len() != 16 {
            return Err(CryptoError::Malformed("time request"));
        }
        let mut plain = challenge;
        plain.extend_from_slice(&time.to_be_bytes());
        plain.extend_from_slice(&link.last_recv().to_be_bytes());
        plain.extend_from_slice(&link.next_send().to_be_bytes());
        let key = link.send_key().clone();
        let env = self.enclave.encrypt(&key, &plain, wire::TIME_RESPONSE_AAD)?;
        let mut reply = vec![wire::TIME_RESPONSE];
        reply.extend_from_slice(&env.encode());
        out.send(Node::Gw, reply);
        Ok(())
    }
}
