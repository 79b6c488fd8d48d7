//! Gateway host and gateway enclave.
//!
//! The host is untrusted: it owns the sealed-record store and can crash and
//! relaunch the enclave. Per-meter sessions live only in the store and are
//! unsealed on every use, so rolling the store back is visible to the
//! counter checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::crypto::{
    ae_decrypt, dh_combine, dh_generate, kdf_session, pke_decrypt, sha256, verify, CipherEnvelope, CryptoError,
    DhSecret, DhShare, PkeKeypair, SharedSecret, SignKeypair, SimRng, SymKey, VerifyKey, POINT_LEN, SIGNATURE_LEN,
};
use crate::enclave::{
    verify_quote, AttestationService, Enclave, Measurement, Quote, StoreError, UntrustedStore, GATEWAY_IDENTITY,
};
use crate::functions::output::{encode_all, FunctionOutput};
use crate::functions::{
    aggregate_window, compute_bill, forecast_sts_traced, price_cpp, price_rtp, price_tou, rtp_predict_day,
    sum_in_order, CppCalendar, FunctionError, RtpParams, StsModel, TouParams, UsageWindow, HOURS,
};
use crate::oblivious::NoTrace;

use super::channel::{Arrival, ChannelEnd, Side, CC_TO_GW, GW_TO_CC};
use super::control::KEY_OK;
use super::meter::{done_signed_bytes, DONE_OK, DONE_REFUSED};
use super::wire::{self, put_short_bytes, Reader, ReportPlain, ResponsePlain};
use super::{nonce_plus_one, AlarmKind, MeterId, Node, Nonce, Note, Outbox, Timer, Timing, OVERFLOW_ALARM_CODE};

pub const KEYS_LABEL: &str = "gw/keys";
pub const LINK_LABEL: &str = "gw/cc_link";
pub const METERS_LABEL: &str = "gw/meters";

pub fn session_label(meter: MeterId) -> String {
    format!("meter/{meter}/session")
}

pub fn last_report_label(meter: MeterId) -> String {
    format!("meter/{meter}/lastreport")
}

const MS_PER_HOUR: u64 = 3_600_000;
const MS_PER_DAY: u64 = 24 * MS_PER_HOUR;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TariffMode {
    #[default]
    Tou,
    Cpp,
    Rtp,
}

/// Parameters of the in-enclave grid functions.
#[derive(Clone, Debug, PartialEq)]
pub struct GridParams {
    pub period_ms: u64,
    /// Wall-clock start of report period 0.
    pub origin_wall_ms: u64,
    /// Day index of period 0, used for price calendars and history.
    pub start_day: u32,
    pub tariff: TariffMode,
    pub tou: TouParams,
    pub cpp: CppCalendar,
    pub rtp: RtpParams,
    pub forecast: StsModel,
}

impl GridParams {
    fn periods_per_hour(&self) -> u64 {
        (MS_PER_HOUR / self.period_ms).max(1)
    }

    fn periods_per_day(&self) -> u64 {
        (MS_PER_DAY / self.period_ms).max(1)
    }

    fn period_of(&self, wall_ms: u64) -> u64 {
        wall_ms.saturating_sub(self.origin_wall_ms) / self.period_ms
    }
}

#[derive(Clone, Debug)]
pub struct GatewayParams {
    pub cc_measurement: Measurement,
    pub attestation_root: VerifyKey,
    pub timing: Timing,
    pub grid: GridParams,
}

/// Trusted time: a reference wall-clock value plus the enclave's monotonic
/// counter. Never derived from the host clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeRef {
    pub reference_ms: u64,
    pub counter_start: u64,
}

impl TimeRef {
    pub fn now(&self, counter: u64) -> u64 {
        self.reference_ms + counter.saturating_sub(self.counter_start)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Session {
    key: SymKey,
    ctr_old: u64,
    nonce_expected: Nonce,
    last_report_digest: [u8; 32],
    init_digest: [u8; 32],
    ack_digest: [u8; 32],
    last_response: Vec<u8>,
}

impl Session {
    fn encode(&self) -> Vec<u8> {
        let mut out = self.key.as_bytes().to_vec();
        out.extend_from_slice(&self.ctr_old.to_be_bytes());
        out.extend_from_slice(&self.nonce_expected);
        out.extend_from_slice(&self.last_report_digest);
        out.extend_from_slice(&self.init_digest);
        out.extend_from_slice(&self.ack_digest);
        put_short_bytes(&mut out, &self.last_response);
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let s = Session {
            key: SymKey::from_bytes(r.array()?),
            ctr_old: r.u64()?,
            nonce_expected: r.array()?,
            last_report_digest: r.array()?,
            init_digest: r.array()?,
            ack_digest: r.array()?,
            last_response: r.short_bytes()?.to_vec(),
        };
        r.finish()?;
        Ok(s)
    }
}

#[derive(Debug)]
enum SessionLoad {
    Missing,
    Corrupt,
}

enum InitStage {
    AwaitKey,
    AwaitAck { key: SymKey, n0: Nonce, echo: Vec<u8> },
}

struct PendingInit {
    digest: [u8; 32],
    init_env: CipherEnvelope,
    stage: InitStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Purpose {
    InitKey(MeterId),
    Window,
}

struct InFlight {
    seq: u64,
    bytes: Vec<u8>,
    purpose: Purpose,
}

struct RestoreMeter {
    fresh: Nonce,
    request: Vec<u8>,
    done: bool,
}

enum Phase {
    AwaitCcAttest { dh: DhSecret, g_a: DhShare, attest: Vec<u8>, sent_at: u64 },
    AwaitInitAck { echo: Vec<u8>, time_sent: u64, ss: SharedSecret, cc_pk: VerifyKey },
    Restoring { challenge: Nonce, time_request: Vec<u8>, sent_at: u64, time_ok: bool, meters: BTreeMap<MeterId, RestoreMeter> },
    Operational,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseName {
    Down,
    Initializing,
    Restoring,
    Operational,
    Failed,
}

pub struct GatewayEnclave {
    enclave: Enclave,
    store: UntrustedStore,
    params: GatewayParams,
    sign: SignKeypair,
    pke: PkeKeypair,
    phase: Phase,
    link: Option<ChannelEnd>,
    time: Option<TimeRef>,
    queue: VecDeque<(u8, Vec<u8>, Purpose)>,
    in_flight: Option<InFlight>,
    pending_inits: BTreeMap<MeterId, PendingInit>,
    recent_done: BTreeMap<MeterId, ([u8; 32], u64)>,
    halted: BTreeSet<MeterId>,
    unknown_alarmed: BTreeSet<MeterId>,
    windows: BTreeMap<u64, Vec<u64>>,
    hours: BTreeMap<u64, BTreeMap<MeterId, Vec<u64>>>,
    load_history: Vec<u64>,
    held_alarms: Vec<FunctionOutput>,
    buffered: Vec<(Node, Vec<u8>)>,
}

impl GatewayEnclave {
    /// Launches an instance. With sealed keys in the store this runs the
    /// restart protocol, otherwise the CC/GW initialization.
    fn launch(enclave: Enclave, store: UntrustedStore, params: GatewayParams, now: u64, out: &mut Outbox) -> Self {
        let mut enclave = enclave;
        let sign = SignKeypair::generate(enclave.rng());
        let pke = PkeKeypair::generate(enclave.rng());
        let mut ge = GatewayEnclave {
            enclave,
            store,
            params,
            sign,
            pke,
            phase: Phase::Failed,
            link: None,
            time: None,
            queue: VecDeque::new(),
            in_flight: None,
            pending_inits: BTreeMap::new(),
            recent_done: BTreeMap::new(),
            halted: BTreeSet::new(),
            unknown_alarmed: BTreeSet::new(),
            windows: BTreeMap::new(),
            hours: BTreeMap::new(),
            load_history: Vec::new(),
            held_alarms: Vec::new(),
            buffered: Vec::new(),
        };
        if ge.store.current_version(KEYS_LABEL).is_some() {
            ge.begin_restore(now, out);
        } else {
            ge.begin_cc_init(now, out);
        }
        ge
    }

    fn phase_name(&self) -> PhaseName {
        match self.phase {
            Phase::AwaitCcAttest { .. } | Phase::AwaitInitAck { .. } => PhaseName::Initializing,
            Phase::Restoring { .. } => PhaseName::Restoring,
            Phase::Operational => PhaseName::Operational,
            Phase::Failed => PhaseName::Failed,
        }
    }

    fn wall_now(&self, now: u64) -> Option<u64> {
        self.time.map(|t| t.now(now))
    }

    fn raise(&mut self, out: &mut Outbox, kind: AlarmKind, meter: Option<MeterId>, detail: &'static str) {
        out.alarm(kind, meter, detail);
        if let (true, Some(m)) = (kind.halts_meter(), meter) {
            if self.halted.insert(m) {
                out.note(Note::Halted { meter: m });
            }
        }
        let record = FunctionOutput::Alarm { kind: kind.code(), meter_id: meter };
        if matches!(self.phase, Phase::Operational) {
            self.enqueue(wire::WINDOW_FORWARD, encode_all(&[record]), Purpose::Window);
        } else {
            self.held_alarms.push(record);
        }
    }

    fn quote_bytes(&self, extra: &[u8]) -> Vec<u8> {
        let mut user_data = self.sign.public().to_bytes().to_vec();
        user_data.extend_from_slice(&self.pke.public());
        user_data.extend_from_slice(extra);
        self.enclave.get_quote(&user_data).encode()
    }

    fn seal_store(&mut self, label: &str, plaintext: &[u8]) {
        let record = self.enclave.seal(label, plaintext).expect("seal IV space");
        self.store.store(&record);
    }

    fn unseal_label(&self, label: &str) -> Result<Vec<u8>, SessionLoad> {
        match self.store.load(label) {
            Ok(record) if record.label == label => self.enclave.unseal(&record).map_err(|_| SessionLoad::Corrupt),
            Ok(_) => Err(SessionLoad::Corrupt),
            Err(StoreError::NotFound(_)) => Err(SessionLoad::Missing),
            Err(_) => Err(SessionLoad::Corrupt),
        }
    }

    fn load_session(&self, meter: MeterId) -> Result<Session, SessionLoad> {
        let bytes = self.unseal_label(&session_label(meter))?;
        Session::decode(&bytes).map_err(|_| SessionLoad::Corrupt)
    }

    fn save_session(&mut self, meter: MeterId, s: &Session) {
        self.seal_store(&session_label(meter), &s.encode());
    }

    fn meter_index(&self) -> Result<Vec<MeterId>, SessionLoad> {
        let bytes = self.unseal_label(METERS_LABEL)?;
        if bytes.len() % 8 != 0 {
            return Err(SessionLoad::Corrupt);
        }
        Ok(bytes.chunks(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect())
    }

    fn save_meter_index(&mut self, ids: &[MeterId]) {
        let bytes: Vec<u8> = ids.iter().flat_map(|id| id.to_be_bytes()).collect();
        self.seal_store(METERS_LABEL, &bytes);
    }

    fn random_nonce(&mut self) -> Nonce {
        let mut n = [0u8; 16];
        self.enclave.rng().fill_bytes(&mut n);
        n
    }

    // ---- CC/GW initialization ----

    fn begin_cc_init(&mut self, now: u64, out: &mut Outbox) {
        let (dh, g_a) = dh_generate(self.enclave.rng());
        let mut attest = vec![wire::GW_ATTEST];
        attest.extend_from_slice(&self.quote_bytes(&g_a.0));
        out.send(Node::Cc, attest.clone());
        out.timer(self.params.timing.retry_timeout, Timer::GwAttest { attempt: 0 });
        self.phase = Phase::AwaitCcAttest { dh, g_a, attest, sent_at: now };
    }

    fn on_cc_attest(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let Phase::AwaitCcAttest { dh, g_a, sent_at, .. } = &self.phase else {
            out.ignore("unexpected control centre attestation");
            return Ok(());
        };
        let mut r = Reader::new(&bytes[1..]);
        let quote_bytes = r.short_bytes()?;
        let cc_time = r.u64()?;
        let sig = r.bytes(SIGNATURE_LEN)?;
        r.finish()?;
        let quote = Quote::decode(quote_bytes).ok_or(CryptoError::Malformed("quote"))?;
        if !verify_quote(&quote, &self.params.cc_measurement, &self.params.attestation_root) {
            return Err(CryptoError::AuthFailure);
        }
        let mut u = Reader::new(&quote.user_data);
        let cc_pk = VerifyKey::from_bytes(u.bytes(POINT_LEN)?)?;
        let g_b = DhShare::from_slice(u.bytes(POINT_LEN)?)?;
        u.finish()?;
        let mut signed = wire::CC_ATTEST_CTX.to_vec();
        signed.extend_from_slice(quote_bytes);
        signed.extend_from_slice(&cc_time.to_be_bytes());
        signed.extend_from_slice(&g_a.0);
        if !verify(&cc_pk, &signed, sig) {
            return Err(CryptoError::AuthFailure);
        }
        let ss = dh_combine(dh, &g_b)?;
        // half the measured round trip approximates the one-way delay
        let rtt = now.saturating_sub(*sent_at);
        let time = TimeRef { reference_ms: cc_time + rtt / 2, counter_start: now };
        self.time = Some(time);
        let t = time.now(now);
        let env = self.enclave.encrypt(&kdf_session(&ss, GW_TO_CC), &t.to_be_bytes(), wire::TIME_ECHO_AAD)?;
        let mut signed = wire::TIME_ECHO_CTX.to_vec();
        signed.extend_from_slice(&env.encode());
        let sig = self.sign.sign(&signed);
        let mut echo = vec![wire::TIME_ECHO];
        echo.extend_from_slice(&env.encode());
        echo.extend_from_slice(&sig.0);
        out.send(Node::Cc, echo.clone());
        out.timer(self.params.timing.retry_timeout, Timer::TimeEcho { attempt: 0 });
        self.phase = Phase::AwaitInitAck { echo, time_sent: t, ss, cc_pk };
        Ok(())
    }

    fn on_init_ack(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let Phase::AwaitInitAck { time_sent, ss, cc_pk, .. } = &self.phase else {
            out.ignore("unexpected init ack");
            return Ok(());
        };
        let mut r = Reader::new(&bytes[1..]);
        let env = r.envelope(wire::INIT_ACK_AAD)?;
        let sig = r.bytes(SIGNATURE_LEN)?;
        r.finish()?;
        let mut signed = wire::INIT_ACK_CTX.to_vec();
        signed.extend_from_slice(&env.encode());
        if !verify(cc_pk, &signed, sig) {
            return Err(CryptoError::AuthFailure);
        }
        let plain = ae_decrypt(&kdf_session(ss, CC_TO_GW), &env, wire::INIT_ACK_AAD)?;
        if plain != time_sent.to_be_bytes() {
            return Err(CryptoError::Malformed("init ack time"));
        }
        let ss = ss.clone();
        let cc_pk = *cc_pk;
        let mut keys = self.sign.secret_bytes().to_vec();
        keys.extend_from_slice(&self.pke.secret_bytes());
        self.seal_store(KEYS_LABEL, &keys);
        let mut link = ss.as_bytes().to_vec();
        link.extend_from_slice(&cc_pk.to_bytes());
        self.seal_store(LINK_LABEL, &link);
        if self.store.current_version(METERS_LABEL).is_none() {
            self.save_meter_index(&[]);
        }
        self.link = Some(ChannelEnd::new(&ss, Side::Gateway));
        out.note(Note::LinkEstablished);
        self.become_operational(now, out);
        Ok(())
    }

    fn become_operational(&mut self, now: u64, out: &mut Outbox) {
        self.phase = Phase::Operational;
        if !self.held_alarms.is_empty() {
            let held = std::mem::take(&mut self.held_alarms);
            self.enqueue(wire::WINDOW_FORWARD, encode_all(&held), Purpose::Window);
        }
        self.schedule_window(now, out);
        for (src, bytes) in std::mem::take(&mut self.buffered) {
            self.dispatch(now, src, &bytes, out);
        }
    }

    fn schedule_window(&mut self, now: u64, out: &mut Outbox) {
        let Some(wall) = self.wall_now(now) else { return };
        let g = &self.params.grid;
        let mut p = g.period_of(wall);
        let close_of = |p: u64| g.origin_wall_ms + p * g.period_ms + g.period_ms / 2;
        if close_of(p) <= wall {
            p += 1;
        }
        out.timer(close_of(p) - wall, Timer::WindowClose { period: p });
    }

    // ---- GW -> CC channel ----

    fn enqueue(&mut self, tag: u8, payload: Vec<u8>, purpose: Purpose) {
        self.queue.push_back((tag, payload, purpose));
    }

    fn pump(&mut self, out: &mut Outbox) {
        if self.in_flight.is_some() || !matches!(self.phase, Phase::Operational) {
            return;
        }
        let Some(link) = self.link.as_mut() else { return };
        if let Some((tag, payload, purpose)) = self.queue.pop_front() {
            let (seq, bytes) = link.seal(&mut self.enclave, tag, &payload).expect("channel IV space");
            out.send(Node::Cc, bytes.clone());
            out.timer(self.params.timing.retry_timeout, Timer::Channel { seq, attempt: 0 });
            self.in_flight = Some(InFlight { seq, bytes, purpose });
        }
    }

    fn on_channel(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let link = self.link.as_mut().ok_or(CryptoError::Malformed("no control centre link"))?;
        let (tag, arrival) = link.open(bytes)?;
        let payload = match arrival {
            Arrival::Fresh { payload, .. } => payload,
            Arrival::Gap { payload, .. } => {
                self.raise(out, AlarmKind::Freshness, None, "control centre channel sequence gap");
                payload
            }
            Arrival::Duplicate { .. } => {
                out.ignore("duplicate control centre message");
                return Ok(());
            }
            Arrival::Stale { .. } => {
                self.raise(out, AlarmKind::Replay, None, "stale control centre message");
                return Ok(());
            }
        };
        let mut r = Reader::new(&payload);
        let reply_to = r.u64()?;
        let purpose = match self.in_flight.as_ref() {
            Some(f) if f.seq == reply_to => f.purpose,
            _ => {
                out.ignore("reply to a request no longer outstanding");
                return Ok(());
            }
        };
        self.in_flight = None;
        match (tag, purpose) {
            (wire::INIT_KEY_RESP, Purpose::InitKey(meter)) => {
                let id = r.u64()?;
                let status = r.u8()?;
                let key: [u8; 16] = r.array()?;
                r.finish()?;
                if id != meter {
                    return Err(CryptoError::Malformed("init key for another meter"));
                }
                self.on_init_key(now, meter, status, SymKey::from_bytes(key), out);
            }
            (wire::WINDOW_ACK, Purpose::Window) => r.finish()?,
            _ => return Err(CryptoError::Malformed("reply does not match request")),
        }
        Ok(())
    }

    // ---- SM initialization ----

    fn on_attest_request(&mut self, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let mut r = Reader::new(&bytes[1..]);
        let meter = r.u64()?;
        let challenge: Nonce = r.array()?;
        r.finish()?;
        let mut reply = vec![wire::GW_QUOTE];
        reply.extend_from_slice(&self.quote_bytes(&challenge));
        out.send(Node::Ud(meter), reply);
        Ok(())
    }

    fn done_message(&self, meter: MeterId, status: u8, digest: &[u8; 32]) -> Vec<u8> {
        let sig = self.sign.sign(&done_signed_bytes(meter, status, digest));
        let mut msg = vec![wire::DONE];
        msg.extend_from_slice(&meter.to_be_bytes());
        msg.push(status);
        msg.extend_from_slice(&sig.0);
        msg
    }

    fn on_init_prime(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let init = pke_decrypt(&self.pke, &bytes[1..])?;
        if init.first() != Some(&wire::INIT) {
            return Err(CryptoError::Malformed("init"));
        }
        let (meter, init_env) = wire::decode_meter_msg(&init, wire::INIT_AAD)?;
        let digest = sha256(bytes);
        if let Some(p) = self.pending_inits.get(&meter) {
            match (&p.stage, p.digest == digest) {
                (InitStage::AwaitAck { .. }, true) => out.send(Node::Ud(meter), self.done_message(meter, DONE_OK, &digest)),
                _ => out.ignore("registration already in progress"),
            }
            return Ok(());
        }
        if let Some(&(d, until)) = self.recent_done.get(&meter) {
            if d == digest && now <= until {
                out.send(Node::Ud(meter), self.done_message(meter, DONE_OK, &digest));
                return Ok(());
            }
        }
        self.pending_inits.insert(meter, PendingInit { digest, init_env, stage: InitStage::AwaitKey });
        self.enqueue(wire::GET_INIT_KEY, meter.to_be_bytes().to_vec(), Purpose::InitKey(meter));
        Ok(())
    }

    fn on_init_key(&mut self, now: u64, meter: MeterId, status: u8, k_init: SymKey, out: &mut Outbox) {
        let Some(pending) = self.pending_inits.get(&meter) else {
            out.ignore("init key without pending registration");
            return;
        };
        let digest = pending.digest;
        if status != KEY_OK {
            self.pending_inits.remove(&meter);
            out.send(Node::Ud(meter), self.done_message(meter, DONE_REFUSED, &digest));
            return;
        }
        let opened = ae_decrypt(&k_init, &pending.init_env, wire::INIT_AAD).and_then(|plain| {
            let mut r = Reader::new(&plain);
            let id = r.u64()?;
            let key: [u8; 16] = r.array()?;
            r.finish()?;
            if id == meter {
                Ok(SymKey::from_bytes(key))
            } else {
                Err(CryptoError::Malformed("init id mismatch"))
            }
        });
        let key = match opened {
            Ok(key) => key,
            Err(_) => {
                self.pending_inits.remove(&meter);
                self.raise(out, AlarmKind::Tamper, Some(meter), "init message does not open under init key");
                out.send(Node::Ud(meter), self.done_message(meter, DONE_REFUSED, &digest));
                return;
            }
        };
        let n0 = self.random_nonce();
        let time = self.wall_now(now).unwrap_or_default();
        let mut plain = time.to_be_bytes().to_vec();
        plain.extend_from_slice(&n0);
        let env = self.enclave.encrypt(&key, &plain, wire::ECHO_AAD).expect("IV space");
        let echo = wire::encode_meter_msg(wire::ECHO, meter, &env);
        out.send(Node::Ud(meter), self.done_message(meter, DONE_OK, &digest));
        out.send(Node::Sm(meter), echo.clone());
        out.timer(self.params.timing.retry_timeout, Timer::Echo { meter, attempt: 0 });
        if let Some(p) = self.pending_inits.get_mut(&meter) {
            p.stage = InitStage::AwaitAck { key, n0, echo };
        }
    }

    fn on_ack(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let (meter, env) = wire::decode_meter_msg(bytes, wire::ACK_AAD)?;
        let digest = sha256(bytes);
        let awaiting = match self.pending_inits.get(&meter) {
            Some(PendingInit { stage: InitStage::AwaitAck { key, n0, .. }, digest: init_digest, .. }) => {
                Some((key.clone(), *n0, *init_digest))
            }
            _ => None,
        };
        let Some((key, n0, init_digest)) = awaiting else {
            return match self.load_session(meter) {
                Ok(s) if s.ack_digest == digest => {
                    out.ignore("duplicate ack");
                    Ok(())
                }
                Ok(s) => {
                    ae_decrypt(&s.key, &env, wire::ACK_AAD)?;
                    self.raise(out, AlarmKind::Replay, Some(meter), "ack outside registration");
                    Ok(())
                }
                Err(_) => {
                    self.alarm_unknown(meter, out);
                    Ok(())
                }
            };
        };
        let plain = ae_decrypt(&key, &env, wire::ACK_AAD)?;
        if plain != nonce_plus_one(&n0) {
            self.pending_inits.remove(&meter);
            self.raise(out, AlarmKind::Freshness, Some(meter), "ack does not carry nonce + 1");
            return Ok(());
        }
        let session = Session {
            key,
            ctr_old: 0,
            nonce_expected: n0,
            last_report_digest: [0; 32],
            init_digest,
            ack_digest: digest,
            last_response: Vec::new(),
        };
        self.save_session(meter, &session);
        let mut index = self.meter_index().unwrap_or_default();
        if !index.contains(&meter) {
            index.push(meter);
            self.save_meter_index(&index);
        }
        self.pending_inits.remove(&meter);
        self.recent_done.insert(meter, (init_digest, now + 4 * self.params.timing.retry_timeout));
        self.halted.remove(&meter);
        out.note(Note::Registered { meter });
        Ok(())
    }

    fn alarm_unknown(&mut self, meter: MeterId, out: &mut Outbox) {
        if self.unknown_alarmed.insert(meter) {
            self.raise(out, AlarmKind::Unknown, Some(meter), "no session for meter");
        } else {
            out.ignore("meter without session");
        }
    }

    // ---- periodic reports ----

    fn on_report(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let (tag, meter, env) = wire::decode_report(bytes)?;
        if tag != wire::REPORT {
            return Err(CryptoError::Malformed("resend report outside restart"));
        }
        if self.halted.contains(&meter) {
            out.ignore("meter halted");
            return Ok(());
        }
        let mut s = match self.load_session(meter) {
            Ok(s) => s,
            Err(SessionLoad::Missing) => {
                self.alarm_unknown(meter, out);
                return Ok(());
            }
            Err(SessionLoad::Corrupt) => {
                self.raise(out, AlarmKind::Tamper, Some(meter), "sealed session unreadable");
                return Ok(());
            }
        };
        let digest = sha256(bytes);
        if digest == s.last_report_digest {
            out.send(Node::Sm(meter), s.last_response.clone());
            return Ok(());
        }
        let plain = ReportPlain::from_bytes(&ae_decrypt(&s.key, &env, wire::REPORT_AAD)?)?;
        if plain.meter_id != meter {
            return Err(CryptoError::Malformed("clear and encrypted meter id differ"));
        }
        if plain.ctr > s.ctr_old + 1 {
            self.raise(out, AlarmKind::Rollback, Some(meter), "counter ahead of sealed state");
        } else if plain.ctr <= s.ctr_old {
            self.raise(out, AlarmKind::Replay, Some(meter), "counter already used");
        } else if plain.nonce != s.nonce_expected {
            self.raise(out, AlarmKind::Freshness, Some(meter), "unexpected nonce");
        } else {
            self.accept(now, &mut s, plain, bytes, out);
        }
        Ok(())
    }

    fn accept(&mut self, now: u64, s: &mut Session, plain: ReportPlain, bytes: &[u8], out: &mut Outbox) {
        let meter = plain.meter_id;
        self.respond(s, meter, plain.ctr, bytes, out);
        self.seal_store(&last_report_label(meter), bytes);
        self.save_session(meter, s);
        let period = self.params.grid.period_of(self.wall_now(now).unwrap_or_default());
        self.windows.entry(period).or_default().push(plain.reading);
        let hour = period / self.params.grid.periods_per_hour();
        self.hours.entry(hour).or_default().entry(meter).or_default().push(plain.reading);
        out.note(Note::Accepted { meter, ctr: plain.ctr, reading: plain.reading, period });
    }

    /// Draws the next nonce, answers the meter and updates `s` in memory.
    fn respond(&mut self, s: &mut Session, meter: MeterId, ctr: u64, bytes: &[u8], out: &mut Outbox) {
        let next = self.random_nonce();
        let plain = ResponsePlain { meter_id: meter, ctr, next_nonce: next };
        let env = self.enclave.encrypt(&s.key, &plain.to_bytes(), wire::RESPONSE_AAD).expect("IV space");
        let response = wire::encode_meter_msg(wire::REPORT_RESPONSE, meter, &env);
        s.ctr_old = ctr;
        s.nonce_expected = next;
        s.last_report_digest = sha256(bytes);
        s.last_response = response.clone();
        out.send(Node::Sm(meter), response);
    }

    // ---- window outputs ----

    fn close_window(&mut self, now: u64, period: u64, out: &mut Outbox) {
        let mut records = Vec::new();
        let overflow = FunctionOutput::Alarm { kind: OVERFLOW_ALARM_CODE, meter_id: None };
        let readings = self.windows.remove(&period).unwrap_or_default();
        let window = UsageWindow { area_id: 1, period_start: period, span: 1, meters: readings.len(), readings };
        match aggregate_window(&window) {
            Ok(total) => {
                records.push(FunctionOutput::Agg { period, total });
                self.load_history.push(total);
            }
            Err(_) => records.push(overflow.clone()),
        }
        let model = self.params.grid.forecast.clone();
        if self.load_history.len() >= model.order() && model.validate().is_ok() {
            let noise = model.sample_noise(self.enclave.rng());
            match forecast_sts_traced(&mut NoTrace, &self.load_history, &model, noise) {
                Ok(load_mwh) => records.push(FunctionOutput::Forecast { period: period + 1, load_mwh }),
                Err(_) => records.push(overflow.clone()),
            }
        }

        let g = self.params.grid.clone();
        let pph = g.periods_per_hour();
        if (period + 1).is_multiple_of(pph) {
            let hour = period / pph;
            let day = g.start_day + (hour * MS_PER_HOUR / MS_PER_DAY) as u32;
            let hour_of_day = (hour % 24) as usize;
            for (meter, readings) in self.hours.remove(&hour).unwrap_or_default() {
                let price = match g.tariff {
                    TariffMode::Tou => Some(price_tou(hour_of_day as u32 * 60, &g.tou)),
                    TariffMode::Cpp => Some(price_cpp(day, hour_of_day as u32 * 60, &g.tou, &g.cpp)),
                    TariffMode::Rtp => g.rtp.days.get(&day).zip(sum_in_order(&mut NoTrace, &readings).ok()).map(
                        |(p, m_h)| price_rtp(m_h, p.a[hour_of_day], p.b[hour_of_day], g.rtp.m0),
                    ),
                };
                let Some(price) = price else {
                    out.ignore("no price for hour");
                    continue;
                };
                match compute_bill(&readings, &vec![price; readings.len()]) {
                    Ok(amount) => records.push(FunctionOutput::Bill { meter_id: meter, hour, amount }),
                    Err(FunctionError::Overflow) => {
                        records.push(FunctionOutput::Alarm { kind: OVERFLOW_ALARM_CODE, meter_id: Some(meter) })
                    }
                    Err(_) => out.ignore("bill shape"),
                }
            }
        }

        let ppd = g.periods_per_day();
        if (period + 1).is_multiple_of(ppd) {
            let next_day = g.start_day + ((period + 1) / ppd) as u32;
            match rtp_predict_day(&g.rtp.days, next_day, g.rtp.weights) {
                Ok(prediction) => {
                    self.broadcast_prices(&prediction, out);
                    records.push(FunctionOutput::Price(prediction));
                }
                Err(_) => out.ignore("no price history for prediction"),
            }
        }

        records.append(&mut self.held_alarms);
        self.enqueue(wire::WINDOW_FORWARD, encode_all(&records), Purpose::Window);
        let _ = now;
    }

    fn broadcast_prices(&mut self, prediction: &crate::functions::PricePrediction, out: &mut Outbox) {
        let mut plain = prediction.day.to_be_bytes().to_vec();
        for h in 0..HOURS {
            plain.extend_from_slice(&prediction.a_micro[h].to_be_bytes());
        }
        for h in 0..HOURS {
            plain.extend_from_slice(&prediction.b_micro[h].to_be_bytes());
        }
        for meter in self.meter_index().unwrap_or_default() {
            if self.halted.contains(&meter) {
                continue;
            }
            if let Ok(s) = self.load_session(meter) {
                let env = self.enclave.encrypt(&s.key, &plain, wire::PRICE_AAD).expect("IV space");
                out.send(Node::Sm(meter), wire::encode_meter_msg(wire::PRICE_BROADCAST, meter, &env));
            }
        }
    }

    // ---- restart ----

    fn begin_restore(&mut self, now: u64, out: &mut Outbox) {
        let keys = self.unseal_label(KEYS_LABEL).ok().and_then(|k| {
            let sign = SignKeypair::from_secret_bytes(k.get(..32)?).ok()?;
            let pke = PkeKeypair::from_secret_bytes(k.get(32..64)?).ok()?;
            Some((sign, pke))
        });
        let link = self.unseal_label(LINK_LABEL).ok().and_then(|l| {
            let ss: [u8; 32] = l.get(..32)?.try_into().ok()?;
            VerifyKey::from_bytes(l.get(32..)?).ok()?;
            Some(SharedSecret::from_bytes(ss))
        });
        let index = self.meter_index();
        let (Some((sign, pke)), Some(ss), Ok(index)) = (keys, link, index) else {
            self.phase = Phase::Failed;
            out.alarm(AlarmKind::Restore, None, "sealed gateway state unreadable");
            return;
        };
        self.sign = sign;
        self.pke = pke;
        self.link = Some(ChannelEnd::new(&ss, Side::Gateway));

        let mut meters = BTreeMap::new();
        for meter in index {
            match self.check_restored_meter(meter) {
                Ok(key) => {
                    let fresh = self.random_nonce();
                    let env = self.enclave.encrypt(&key, &fresh, wire::RESEND_AAD).expect("IV space");
                    let request = wire::encode_meter_msg(wire::RESEND_REQUEST, meter, &env);
                    out.send(Node::Sm(meter), request.clone());
                    meters.insert(meter, RestoreMeter { fresh, request, done: false });
                }
                Err(detail) => self.raise(out, AlarmKind::Restore, Some(meter), detail),
            }
        }
        let challenge = self.random_nonce();
        let link = self.link.as_ref().expect("set above");
        let key = link.send_key().clone();
        let env = self.enclave.encrypt(&key, &challenge, wire::TIME_REQUEST_AAD).expect("IV space");
        let mut time_request = vec![wire::TIME_REQUEST];
        time_request.extend_from_slice(&env.encode());
        out.send(Node::Cc, time_request.clone());
        out.timer(self.params.timing.retry_timeout, Timer::Restore { attempt: 0 });
        self.phase = Phase::Restoring { challenge, time_request, sent_at: now, time_ok: false, meters };
    }

    /// Unseals a meter's session and checks it against its sealed last report.
    fn check_restored_meter(&self, meter: MeterId) -> Result<SymKey, &'static str> {
        let s = self.load_session(meter).map_err(|_| "meter session unreadable")?;
        if s.ctr_old == 0 {
            return Ok(s.key);
        }
        let last = self.last_report(meter, &s.key).ok_or("last report unreadable")?;
        if last.ctr != s.ctr_old {
            return Err("last report does not match session counter");
        }
        Ok(s.key)
    }

    fn last_report(&self, meter: MeterId, key: &SymKey) -> Option<ReportPlain> {
        let raw = self.unseal_label(&last_report_label(meter)).ok()?;
        let (tag, id, env) = wire::decode_report(&raw).ok()?;
        let plain = ReportPlain::from_bytes(&ae_decrypt(key, &env, wire::report_aad(tag)?).ok()?).ok()?;
        (id == meter && plain.meter_id == meter).then_some(plain)
    }

    fn on_time_response(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let link = self.link.as_ref().ok_or(CryptoError::Malformed("no control centre link"))?;
        let mut r = Reader::new(&bytes[1..]);
        let env = r.envelope(wire::TIME_RESPONSE_AAD)?;
        r.finish()?;
        let plain = ae_decrypt(link.recv_key(), &env, wire::TIME_RESPONSE_AAD)?;
        let mut r = Reader::new(&plain);
        let challenge: Nonce = r.array()?;
        let cc_time = r.u64()?;
        let cc_last_recv = r.u64()?;
        let cc_next_send = r.u64()?;
        r.finish()?;
        let Phase::Restoring { challenge: expected, sent_at, time_ok, .. } = &mut self.phase else {
            self.raise(out, AlarmKind::Replay, None, "time response outside restart");
            return Ok(());
        };
        if challenge != *expected || *time_ok {
            if *time_ok && challenge == *expected {
                out.ignore("duplicate time response");
                return Ok(());
            }
            self.raise(out, AlarmKind::Replay, None, "time response for another challenge");
            return Ok(());
        }
        *time_ok = true;
        let rtt = now.saturating_sub(*sent_at);
        self.time = Some(TimeRef { reference_ms: cc_time + rtt / 2, counter_start: now });
        if let Some(link) = self.link.as_mut() {
            link.resync(cc_last_recv + 1, cc_next_send.saturating_sub(1));
        }
        self.try_finish_restore(now, out);
        Ok(())
    }

    fn on_resend_report(&mut self, now: u64, bytes: &[u8], out: &mut Outbox) -> Result<(), CryptoError> {
        let (tag, meter, env) = wire::decode_report(bytes)?;
        if tag != wire::RESEND_REPORT {
            return Err(CryptoError::Malformed("not a resend report"));
        }
        let fresh = match &self.phase {
            Phase::Restoring { meters, .. } => meters.get(&meter).filter(|m| !m.done).map(|m| m.fresh),
            _ => None,
        };
        let mut s = match self.load_session(meter) {
            Ok(s) => s,
            Err(_) => {
                self.alarm_unknown(meter, out);
                return Ok(());
            }
        };
        let digest = sha256(bytes);
        let Some(fresh) = fresh else {
            if digest == s.last_report_digest {
                out.send(Node::Sm(meter), s.last_response.clone());
            } else {
                ae_decrypt(&s.key, &env, wire::RESEND_REPORT_AAD)?;
                self.raise(out, AlarmKind::Replay, Some(meter), "resend report outside restart");
            }
            return Ok(());
        };
        let plain = ReportPlain::from_bytes(&ae_decrypt(&s.key, &env, wire::RESEND_REPORT_AAD)?)?;
        if plain.meter_id != meter {
            return Err(CryptoError::Malformed("clear and encrypted meter id differ"));
        }
        if plain.nonce != fresh {
            self.raise(out, AlarmKind::Freshness, Some(meter), "resend report with wrong nonce");
            return Ok(());
        }
        if plain.ctr == s.ctr_old {
            let consistent = s.ctr_old == 0
                || self.last_report(meter, &s.key).is_some_and(|last| last.reading == plain.reading);
            if consistent {
                self.respond(&mut s, meter, plain.ctr, bytes, out);
                self.save_session(meter, &s);
            } else {
                self.raise(out, AlarmKind::Restore, Some(meter), "resent reading differs from sealed report");
            }
        } else if plain.ctr == s.ctr_old + 1 {
            self.accept(now, &mut s, plain, bytes, out);
        } else {
            self.raise(out, AlarmKind::Restore, Some(meter), "resent counter outside {old, old + 1}");
        }
        if let Phase::Restoring { meters, .. } = &mut self.phase {
            if let Some(m) = meters.get_mut(&meter) {
                m.done = true;
            }
        }
        self.try_finish_restore(now, out);
        Ok(())
    }

    fn try_finish_restore(&mut self, now: u64, out: &mut Outbox) {
        let ready = match &self.phase {
            Phase::Restoring { time_ok, meters, .. } => *time_ok && meters.values().all(|m| m.done),
            _ => false,
        };
        if ready {
            out.note(Note::Restored);
            self.become_operational(now, out);
        }
    }

    // ---- dispatch ----

    fn on_timer(&mut self, now: u64, timer: Timer, out: &mut Outbox) {
        let timeout = self.params.timing.retry_timeout;
        match timer {
            Timer::GwAttest { attempt } => {
                if let Phase::AwaitCcAttest { attest, sent_at, .. } = &mut self.phase {
                    if attempt == 0 {
                        *sent_at = now;
                        out.send(Node::Cc, attest.clone());
                        out.timer(timeout, Timer::GwAttest { attempt: 1 });
                    } else {
                        self.phase = Phase::Failed;
                        out.alarm(AlarmKind::Freshness, None, "control centre did not answer attestation");
                    }
                }
            }
            Timer::TimeEcho { attempt } => {
                if let Phase::AwaitInitAck { echo, .. } = &self.phase {
                    if attempt == 0 {
                        out.send(Node::Cc, echo.clone());
                        out.timer(timeout, Timer::TimeEcho { attempt: 1 });
                    } else {
                        self.phase = Phase::Failed;
                        out.alarm(AlarmKind::Freshness, None, "control centre did not confirm time");
                    }
                }
            }
            Timer::Channel { seq, attempt } => {
                let Some(f) = self.in_flight.as_ref().filter(|f| f.seq == seq) else { return };
                if attempt == 0 {
                    out.send(Node::Cc, f.bytes.clone());
                    out.timer(timeout, Timer::Channel { seq, attempt: 1 });
                } else {
                    let purpose = f.purpose;
                    self.in_flight = None;
                    if let Purpose::InitKey(meter) = purpose {
                        self.pending_inits.remove(&meter);
                    }
                    self.raise(out, AlarmKind::Freshness, None, "control centre did not answer");
                }
            }
            Timer::Echo { meter, attempt } => {
                let Some(PendingInit { stage: InitStage::AwaitAck { echo, .. }, .. }) = self.pending_inits.get(&meter)
                else {
                    return;
                };
                if attempt == 0 {
                    out.send(Node::Sm(meter), echo.clone());
                    out.timer(timeout, Timer::Echo { meter, attempt: 1 });
                } else {
                    self.pending_inits.remove(&meter);
                    self.raise(out, AlarmKind::Freshness, Some(meter), "meter did not acknowledge echo");
                }
            }
            Timer::Restore { attempt } => self.on_restore_timer(now, attempt, out),
            Timer::WindowClose { period } => {
                if matches!(self.phase, Phase::Operational) {
                    self.close_window(now, period, out);
                    self.schedule_window(now, out);
                }
            }
            Timer::ReportRetry { .. } | Timer::UdStep { .. } => {}
        }
        self.pump(out);
    }

    fn on_restore_timer(&mut self, now: u64, attempt: u8, out: &mut Outbox) {
        let Phase::Restoring { time_request, time_ok, meters, sent_at, .. } = &mut self.phase else { return };
        if attempt == 0 {
            if !*time_ok {
                *sent_at = now;
                out.send(Node::Cc, time_request.clone());
            }
            for (meter, m) in meters.iter().filter(|(_, m)| !m.done) {
                out.send(Node::Sm(*meter), m.request.clone());
            }
            out.timer(self.params.timing.retry_timeout, Timer::Restore { attempt: 1 });
            return;
        }
        let time_ok = *time_ok;
        let silent: Vec<MeterId> = meters.iter().filter(|(_, m)| !m.done).map(|(id, _)| *id).collect();
        for m in meters.values_mut() {
            m.done = true;
        }
        for meter in silent {
            self.raise(out, AlarmKind::Restore, Some(meter), "meter did not answer restart");
        }
        if time_ok {
            self.try_finish_restore(now, out);
        } else {
            self.phase = Phase::Failed;
            out.alarm(AlarmKind::Restore, None, "control centre time unreachable");
        }
    }

    fn dispatch(&mut self, now: u64, src: Node, bytes: &[u8], out: &mut Outbox) {
        let Some(&tag) = bytes.first() else {
            self.raise(out, AlarmKind::Tamper, None, "empty message at gateway");
            return;
        };
        let operational = matches!(self.phase, Phase::Operational);
        if matches!(self.phase, Phase::Failed) {
            out.ignore("gateway enclave failed");
            return;
        }
        if !operational && matches!(tag, wire::REPORT | wire::INIT_PRIME | wire::ACK) {
            self.buffered.push((src, bytes.to_vec()));
            return;
        }
        let result = match tag {
            wire::CC_ATTEST => self.on_cc_attest(now, bytes, out),
            wire::INIT_ACK => self.on_init_ack(now, bytes, out),
            wire::INIT_KEY_RESP | wire::WINDOW_ACK => self.on_channel(now, bytes, out),
            wire::TIME_RESPONSE => self.on_time_response(now, bytes, out),
            wire::ATTEST_REQUEST => self.on_attest_request(bytes, out),
            wire::INIT_PRIME => self.on_init_prime(now, bytes, out),
            wire::ACK => self.on_ack(now, bytes, out),
            wire::REPORT => self.on_report(now, bytes, out),
            wire::RESEND_REPORT => self.on_resend_report(now, bytes, out),
            _ => Err(CryptoError::Malformed("unexpected message at gateway")),
        };
        if result.is_err() {
            let meter = match tag {
                wire::REPORT | wire::RESEND_REPORT | wire::ACK => wire::peek_meter_id(bytes),
                _ => None,
            };
            self.raise(out, AlarmKind::Tamper, meter, "gateway rejected message");
        }
    }
}

/// The untrusted gateway host. It relays messages into the enclave, owns
/// the sealed-record store and decides when the enclave runs.
pub struct Gateway {
    params: GatewayParams,
    store: UntrustedStore,
    attestation: Arc<AttestationService>,
    root_seal_secret: Vec<u8>,
    entropy: SimRng,
    enclave: Option<GatewayEnclave>,
    launches: u32,
}

impl Gateway {
    pub fn new(
        params: GatewayParams,
        attestation: Arc<AttestationService>,
        root_seal_secret: Vec<u8>,
        entropy: SimRng,
    ) -> Self {
        Gateway {
            params,
            store: UntrustedStore::new(),
            attestation,
            root_seal_secret,
            entropy,
            enclave: None,
            launches: 0,
        }
    }

    pub fn measurement() -> Measurement {
        Measurement::of(GATEWAY_IDENTITY)
    }

    pub fn store(&self) -> &UntrustedStore {
        &self.store
    }

    pub fn is_up(&self) -> bool {
        self.enclave.is_some()
    }

    pub fn launches(&self) -> u32 {
        self.launches
    }

    pub fn phase(&self) -> PhaseName {
        self.enclave.as_ref().map_or(PhaseName::Down, GatewayEnclave::phase_name)
    }

    /// Trusted enclave time at monotonic counter value `now`.
    pub fn enclave_time(&self, now: u64) -> Option<u64> {
        self.enclave.as_ref().and_then(|e| e.wall_now(now))
    }

    pub fn halted(&self) -> Vec<MeterId> {
        self.enclave.as_ref().map(|e| e.halted.iter().copied().collect()).unwrap_or_default()
    }

    pub fn boot(&mut self, now: u64, out: &mut Outbox) {
        let enclave =
            Enclave::create(GATEWAY_IDENTITY, &self.root_seal_secret, self.attestation.clone(), &mut self.entropy);
        self.launches += 1;
        let mut ge = GatewayEnclave::launch(enclave, self.store.clone(), self.params.clone(), now, out);
        ge.pump(out);
        self.enclave = Some(ge);
    }

    /// Tears the enclave down; everything not sealed is lost.
    pub fn crash(&mut self) {
        self.enclave = None;
    }

    /// Returns false when no enclave is running and the message was dropped.
    pub fn handle(&mut self, now: u64, src: Node, bytes: &[u8], out: &mut Outbox) -> bool {
        let Some(ge) = self.enclave.as_mut() else { return false };
        ge.dispatch(now, src, bytes, out);
        ge.pump(out);
        true
    }

    pub fn on_timer(&mut self, now: u64, timer: Timer, out: &mut Outbox) {
        if let Some(ge) = self.enclave.as_mut() {
            ge.on_timer(now, timer, out);
        }
    }
}
