//! Smart meter and user device.

use rand::RngCore;

use crate::crypto::{
    ae_decrypt, ae_encrypt_with_iv, pke_encrypt, sha256, CryptoError, IvSequence, SimRng, SymKey, VerifyKey,
    POINT_LEN, SIGNATURE_LEN,
};
use crate::enclave::{verify_quote, Measurement, Quote};
use crate::functions::{PricePrediction, HOURS};

use super::wire::{self, ReportPlain, ResponsePlain};
use super::{nonce_plus_one, AlarmKind, MeterId, Node, Nonce, Note, Outbox, Timer, Timing};

/// IV prefix of every key a meter encrypts under. Enclave prefixes are odd.
pub const SM_IV_PREFIX: u32 = 2;

struct PendingReport {
    ctr: u64,
    bytes: Vec<u8>,
    retried: bool,
    /// No further retries or alarms for this report.
    settled: bool,
}

pub struct SmartMeter {
    id: MeterId,
    k_init: SymKey,
    init_ivs: IvSequence,
    key: Option<SymKey>,
    key_ivs: IvSequence,
    pending_key: Option<SymKey>,
    init_msg: Option<Vec<u8>>,
    ctr: u64,
    nonce: Nonce,
    last_reading: u64,
    pending: Option<PendingReport>,
    answered_echo: Option<([u8; 32], Vec<u8>)>,
    answered_resend: Option<([u8; 32], Vec<u8>)>,
    time_offset: Option<i128>,
    prices: Option<PricePrediction>,
    rng: SimRng,
    timing: Timing,
}

impl SmartMeter {
    pub fn new(id: MeterId, k_init: SymKey, rng: SimRng, timing: Timing) -> Self {
        SmartMeter {
            id,
            k_init,
            init_ivs: IvSequence::new(SM_IV_PREFIX),
            key: None,
            key_ivs: IvSequence::new(SM_IV_PREFIX),
            pending_key: None,
            init_msg: None,
            ctr: 0,
            nonce: [0; 16],
            last_reading: 0,
            pending: None,
            answered_echo: None,
            answered_resend: None,
            time_offset: None,
            prices: None,
            rng,
            timing,
        }
    }

    pub fn id(&self) -> MeterId {
        self.id
    }

    pub fn ctr(&self) -> u64 {
        self.ctr
    }

    pub fn is_registered(&self) -> bool {
        self.key.is_some()
    }

    pub fn has_unacknowledged_report(&self) -> bool {
        self.pending.is_some()
    }

    /// Local wall-clock time, once set by the gateway's Echo.
    pub fn local_time(&self, now: u64) -> Option<u64> {
        self.time_offset.map(|off| (now as i128 + off).max(0) as u64)
    }

    pub fn prices(&self) -> Option<&PricePrediction> {
        self.prices.as_ref()
    }

    /// Forgets the cached Init so the next trigger generates a new `K_i`.
    pub fn begin_reregistration(&mut self) {
        self.init_msg = None;
        self.pending_key = None;
    }

    fn encrypt(&mut self, plaintext: &[u8], aad: &[u8]) -> Result<crate::crypto::CipherEnvelope, CryptoError> {
        let key = self.key.as_ref().ok_or(CryptoError::Malformed("meter has no session key"))?;
        Ok(ae_encrypt_with_iv(key, self.key_ivs.next_iv()?, plaintext, aad))
    }

    /// Starts report period: increments `ctr`, then encrypts and sends.
    pub fn report(&mut self, _now: u64, reading: u64, out: &mut Outbox) {
        if self.key.is_none() {
            out.ignore("meter not registered");
            return;
        }
        self.ctr += 1;
        let plain = ReportPlain { meter_id: self.id, reading, nonce: self.nonce, ctr: self.ctr };
        let env = self.encrypt(&plain.to_bytes(), wire::REPORT_AAD).expect("meter IV space");
        let bytes = wire::encode_report(wire::REPORT, self.id, &env);
        self.last_reading = reading;
        self.pending = Some(PendingReport { ctr: self.ctr, bytes: bytes.clone(), retried: false, settled: false });
        out.note(Note::ReportSent { meter: self.id, ctr: self.ctr, reading });
        out.send(Node::Gw, bytes);
        out.timer(self.timing.retry_timeout, Timer::ReportRetry { ctr: self.ctr });
    }

    pub fn on_timer(&mut self, _now: u64, timer: Timer, out: &mut Outbox) {
        let Timer::ReportRetry { ctr } = timer else { return };
        let Some(p) = self.pending.as_mut().filter(|p| p.ctr == ctr && !p.settled) else { return };
        if !p.retried {
            p.retried = true;
            out.send(Node::Gw, p.bytes.clone());
            out.timer(self.timing.retry_timeout, Timer::ReportRetry { ctr });
        } else {
            p.settled = true;
            out.alarm(AlarmKind::Freshness, Some(self.id), "report never acknowledged");
        }
    }

    pub fn handle(&mut self, now: u64, src: Node, bytes: &[u8], out: &mut Outbox) {
        let Some(&tag) = bytes.first() else {
            out.alarm(AlarmKind::Tamper, Some(self.id), "empty message at meter");
            return;
        };
        let result = match (src, tag) {
            (Node::Ud(_), wire::INIT_TRIGGER) => {
                self.on_init_trigger(bytes, out);
                Ok(())
            }
            (Node::Gw, wire::ECHO) => self.on_echo(now, bytes, out),
            (Node::Gw, wire::REPORT_RESPONSE) => self.on_response(bytes, out),
            (Node::Gw, wire::RESEND_REQUEST) => self.on_resend_request(bytes, out),
            (Node::Gw, wire::PRICE_BROADCAST) => self.on_prices(bytes, out),
            _ => Err(CryptoError::Malformed("unexpected message at meter")),
        };
        if result.is_err() {
            out.alarm(AlarmKind::Tamper, Some(self.id), "meter rejected message");
        }
    }

    fn on_init_trigger(&mut self, bytes: &[u8], out: &mut Outbox) {
        if bytes.len() != 1 {
            out.alarm(AlarmKind::Tamper, Some(self.id), "malformed init trigger");
            return;
        }
        if self.init_msg.is_none() {
            let k_i = SymKey::generate(&mut self.rng);
            let mut plain = self.id.to_be_bytes().to_vec();
            plain.extend_from_slice(k_i.as_bytes());
            let iv = self.init_ivs.next_iv().expect("meter IV space");
            let env = ae_encrypt_with_iv(&self.k_init, iv, &plain, wire::INIT_AAD);
            self.init_msg = Some(wire::encode_meter_msg(wire::INIT, self.id, &env));
            self.pending_key = Some(k_i);
        }
        out.send(Node::Ud(self.id), self.init_msg.clone().unwrap());
    }

    fn on_echo(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let digest = sha256(bytes);
        if let Some((seen, ack)) = &self.answered_echo {
            if *seen == digest {
                out.send(Node::Gw, ack.clone());
                return Ok(());
            }
        }
        let Some(pending_key) = self.pending_key.as_ref() else {
            out.ignore("echo without registration in progress");
            return Ok(());
        };
        let (id, env) = wire::decode_meter_msg(bytes, wire::ECHO_AAD)?;
        let plain = ae_decrypt(pending_key, &env, wire::ECHO_AAD)?;
        let mut r = wire::Reader::new(&plain);
        let time = r.u64()?;
        let n0: Nonce = r.array()?;
        r.finish()?;
        if id != self.id {
            return Err(CryptoError::Malformed("echo for another meter"));
        }
        self.key = self.pending_key.take();
        self.key_ivs = IvSequence::new(SM_IV_PREFIX);
        self.ctr = 0;
        self.nonce = n0;
        self.pending = None;
        self.time_offset = Some(time as i128 - now as i128);
        let env = self.encrypt(&nonce_plus_one(&n0), wire::ACK_AAD)?;
        let ack = wire::encode_meter_msg(wire::ACK, self.id, &env);
        self.answered_echo = Some((digest, ack.clone()));
        out.note(Note::MeterReady { meter: self.id });
        out.send(Node::Gw, ack);
        Ok(())
    }

    fn open(&self, bytes: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let key = self.key.as_ref().ok_or(CryptoError::Malformed("meter has no session key"))?;
        let (id, env) = wire::decode_meter_msg(bytes, aad)?;
        if id != self.id {
            return Err(CryptoError::Malformed("message for another meter"));
        }
        ae_decrypt(key, &env, aad)
    }

    fn on_response(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let plain = ResponsePlain::from_bytes(&self.open(bytes, wire::RESPONSE_AAD)?)?;
        if plain.meter_id != self.id {
            return Err(CryptoError::Malformed("response for another meter"));
        }
        if plain.ctr != self.ctr {
            out.ignore("response for an older report");
            return Ok(());
        }
        self.nonce = plain.next_nonce;
        self.pending = None;
        Ok(())
    }

    fn on_resend_request(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let digest = sha256(bytes);
        if let Some((seen, reply)) = &self.answered_resend {
            if *seen == digest {
                out.send(Node::Gw, reply.clone());
                return Ok(());
            }
        }
        let plain = self.open(bytes, wire::RESEND_AAD)?;
        let fresh: Nonce = plain.as_slice().try_into().map_err(|_| CryptoError::Malformed("resend request"))?;
        let reading = if self.ctr == 0 { 0 } else { self.last_reading };
        let report = ReportPlain { meter_id: self.id, reading, nonce: fresh, ctr: self.ctr };
        let env = self.encrypt(&report.to_bytes(), wire::RESEND_REPORT_AAD)?;
        let reply = wire::encode_report(wire::RESEND_REPORT, self.id, &env);
        if let Some(p) = self.pending.as_mut() {
            p.settled = true;
        }
        self.answered_resend = Some((digest, reply.clone()));
        out.send(Node::Gw, reply);
        Ok(())
    }

    fn on_prices(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let plain = self.open(bytes, wire::PRICE_AAD)?;
        let mut r = wire::Reader::new(&plain);
        let day = r.u32()?;
        let mut p = PricePrediction { day, a_micro: [0; HOURS], b_micro: [0; HOURS] };
        for h in 0..HOURS {
            p.a_micro[h] = r.u64()?;
        }
        for h in 0..HOURS {
            p.b_micro[h] = r.u64()?;
        }
        r.finish()?;
        self.prices = Some(p);
        out.note(Note::PriceReceived { meter: self.id, day });
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdState {
    Idle,
    AwaitQuote,
    AwaitInit,
    AwaitDone,
    Finished { registered: bool },
}

/// The customer's phone app bridging a meter to the gateway enclave.
pub struct UserDevice {
    id: MeterId,
    gw_measurement: Measurement,
    attestation_root: VerifyKey,
    state: UdState,
    challenge: Nonce,
    gw_sign: Option<VerifyKey>,
    gw_pke: Option<[u8; POINT_LEN]>,
    attest_request: Vec<u8>,
    init_prime: Vec<u8>,
    rng: SimRng,
    timing: Timing,
}

impl UserDevice {
    pub fn new(id: MeterId, gw_measurement: Measurement, attestation_root: VerifyKey, rng: SimRng, timing: Timing) -> Self {
        UserDevice {
            id,
            gw_measurement,
            attestation_root,
            state: UdState::Idle,
            challenge: [0; 16],
            gw_sign: None,
            gw_pke: None,
            attest_request: Vec::new(),
            init_prime: Vec::new(),
            rng,
            timing,
        }
    }

    pub fn state(&self) -> UdState {
        self.state
    }

    /// Stage 1: asks the gateway enclave for a quote.
    pub fn start(&mut self, out: &mut Outbox) {
        self.rng.fill_bytes(&mut self.challenge);
        let mut req = vec![wire::ATTEST_REQUEST];
        req.extend_from_slice(&self.id.to_be_bytes());
        req.extend_from_slice(&self.challenge);
        self.attest_request = req.clone();
        self.state = UdState::AwaitQuote;
        out.send(Node::Gw, req);
        out.timer(self.timing.retry_timeout, Timer::UdStep { step: 0, attempt: 0 });
    }

    fn step_of(state: UdState) -> Option<u8> {
        match state {
            UdState::AwaitQuote => Some(0),
            UdState::AwaitInit => Some(1),
            UdState::AwaitDone => Some(2),
            _ => None,
        }
    }

    pub fn on_timer(&mut self, _now: u64, timer: Timer, out: &mut Outbox) {
        let Timer::UdStep { step, attempt } = timer else { return };
        if Self::step_of(self.state) != Some(step) {
            return;
        }
        if attempt == 0 {
            match step {
                0 => out.send(Node::Gw, self.attest_request.clone()),
                1 => out.send(Node::Sm(self.id), vec![wire::INIT_TRIGGER]),
                _ => out.send(Node::Gw, self.init_prime.clone()),
            }
            out.timer(self.timing.retry_timeout, Timer::UdStep { step, attempt: 1 });
        } else {
            self.state = UdState::Finished { registered: false };
            out.alarm(AlarmKind::Freshness, Some(self.id), "registration timed out");
        }
    }

    pub fn handle(&mut self, _now: u64, src: Node, bytes: &[u8], out: &mut Outbox) {
        let tag = bytes.first().copied();
        let result = match (src, tag, self.state) {
            (Node::Gw, Some(wire::GW_QUOTE), UdState::AwaitQuote) => self.on_quote(bytes, out),
            (Node::Sm(_), Some(wire::INIT), UdState::AwaitInit) => self.on_init(bytes, out),
            (Node::Gw, Some(wire::DONE), UdState::AwaitDone) => self.on_done(bytes, out),
            (Node::Gw, Some(wire::GW_QUOTE | wire::DONE), _) | (Node::Sm(_), Some(wire::INIT), _) => {
                out.ignore("user device not waiting for this message");
                Ok(())
            }
            _ => Err(CryptoError::Malformed("unexpected message at user device")),
        };
        if result.is_err() {
            out.alarm(AlarmKind::Tamper, Some(self.id), "user device rejected message");
        }
    }

    fn on_quote(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let quote = Quote::decode(&bytes[1..]).ok_or(CryptoError::Malformed("quote"))?;
        if !verify_quote(&quote, &self.gw_measurement, &self.attestation_root) {
            return Err(CryptoError::AuthFailure);
        }
        let mut r = wire::Reader::new(&quote.user_data);
        let sign = VerifyKey::from_bytes(r.bytes(POINT_LEN)?)?;
        let pke: [u8; POINT_LEN] = r.array()?;
        let challenge: Nonce = r.array()?;
        r.finish()?;
        if challenge != self.challenge {
            return Err(CryptoError::Malformed("stale quote"));
        }
        self.gw_sign = Some(sign);
        self.gw_pke = Some(pke);
        self.state = UdState::AwaitInit;
        out.send(Node::Sm(self.id), vec![wire::INIT_TRIGGER]);
        out.timer(self.timing.retry_timeout, Timer::UdStep { step: 1, attempt: 0 });
        Ok(())
    }

    fn on_init(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        if wire::peek_meter_id(bytes) != Some(self.id) {
            return Err(CryptoError::Malformed("init for another meter"));
        }
        let pke = self.gw_pke.ok_or(CryptoError::Malformed("no gateway key"))?;
        let mut msg = vec![wire::INIT_PRIME];
        msg.extend_from_slice(&pke_encrypt(&pke, bytes, &mut self.rng)?);
        self.init_prime = msg.clone();
        self.state = UdState::AwaitDone;
        out.send(Node::Gw, msg);
        out.timer(self.timing.retry_timeout, Timer::UdStep { step: 2, attempt: 0 });
        Ok(())
    }

    fn on_done(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let mut r = wire::Reader::new(&bytes[1..]);
        let id = r.u64()?;
        let status = r.u8()?;
        let sig = r.bytes(SIGNATURE_LEN)?;
        r.finish()?;
        let signed = done_signed_bytes(id, status, &sha256(&self.init_prime));
        let pk = self.gw_sign.as_ref().ok_or(CryptoError::Malformed("no gateway key"))?;
        if id != self.id || !crate::crypto::verify(pk, &signed, sig) {
            return Err(CryptoError::AuthFailure);
        }
        let registered = status == DONE_OK;
        self.state = UdState::Finished { registered };
        if !registered {
            out.note(Note::RegistrationRefused { meter: self.id });
        }
        Ok(())
    }
}

pub const DONE_OK: u8 = 0;
pub const DONE_REFUSED: u8 = 1;

/// Bytes covered by the gateway's signature on a Done message.
pub fn done_signed_bytes(meter_id: MeterId, status: u8, init_prime_digest: &[u8; 32]) -> Vec<u8> {
    let mut m = wire::DONE_CTX.to_vec();
    m.extend_from_slice(&meter_id.to_be_bytes());
    m.push(status);
    m.extend_from_slice(init_prime_digest);
    m
}
