//! Deterministic discrete-event simulator with an adversary on every link.
//!
//! One tick is one millisecond. Events are ordered by `(tick, insertion
//! order)`, so a run is a pure function of its config, script and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use thiserror::Error;

use crate::crypto::{sha256, SimRng, SymKey};
use crate::enclave::{AttestationService, Enclave, Measurement, CONTROL_IDENTITY, GATEWAY_IDENTITY};
use crate::functions::output::FunctionOutput;
use crate::protocols::control::{ControlCenter, ControlParams};
use crate::protocols::gateway::{Gateway, GatewayParams, PhaseName};
use crate::protocols::meter::{SmartMeter, UserDevice};
use crate::protocols::{wire, AlarmKind, MeterId, Node, Note, Outbox, Timer};

pub mod config;
pub mod log;
pub mod script;
pub mod sweep;

pub use config::{ConfigError, ScenarioConfig};
pub use log::{AlarmFields, EventKind, EventLog, LogEvent};
pub use script::{Action, AdversaryScript, Selector};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("script action {index} never matched anything: {action}")]
    ActionNeverFired { index: usize, action: String },
    #[error("script action {index} cannot run: {reason}")]
    InvalidAction { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlarmEvent {
    pub tick: u64,
    pub source: Node,
    pub kind: AlarmKind,
    pub meter_id: Option<MeterId>,
    pub detail: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AcceptedReport {
    pub tick: u64,
    pub meter: MeterId,
    pub ctr: u64,
    pub reading: u64,
    pub period: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SentReport {
    pub tick: u64,
    pub meter: MeterId,
    pub ctr: u64,
    pub reading: u64,
}

/// Everything observable about one run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub log: EventLog,
    pub alarms: Vec<AlarmEvent>,
    pub accepted: Vec<AcceptedReport>,
    pub sent: Vec<SentReport>,
    /// Function outputs received by the control centre, in arrival order.
    pub cc_outputs: Vec<FunctionOutput>,
    /// Messages sent over the network, excluding the meter/phone pairing link.
    pub network_messages: usize,
    pub messages_by_tag: BTreeMap<&'static str, usize>,
    /// Wire messages and stored records, when `capture_bytes` is set.
    pub captured: Vec<Vec<u8>>,
    pub registered: Vec<MeterId>,
    pub halted: Vec<MeterId>,
    pub gateway_phase: PhaseName,
    pub gateway_launches: u32,
    pub end_tick: u64,
    pub cc_time_at_end: u64,
    pub ge_time_at_end: Option<u64>,
    pub host_time_at_end: i128,
    /// Gateway store writes as `(tick, label, version)`.
    pub store_writes: Vec<(u64, String, usize)>,
}

impl Outcome {
    /// Accepted `(meter, ctr, reading)` triples.
    pub fn accepted_state(&self) -> BTreeSet<(MeterId, u64, u64)> {
        self.accepted.iter().map(|a| (a.meter, a.ctr, a.reading)).collect()
    }

    pub fn sent_state(&self) -> BTreeSet<(MeterId, u64, u64)> {
        self.sent.iter().map(|s| (s.meter, s.ctr, s.reading)).collect()
    }

    /// Sum of all AGG records received by the control centre.
    pub fn aggregate_total(&self) -> u128 {
        self.cc_outputs
            .iter()
            .map(|o| match o {
                FunctionOutput::Agg { total, .. } => *total as u128,
                _ => 0,
            })
            .sum()
    }

    pub fn alarm_count(&self, kind: AlarmKind) -> usize {
        self.alarms.iter().filter(|a| a.kind == kind).count()
    }

    /// Accepted counters per meter, in acceptance order.
    pub fn accepted_ctrs(&self) -> BTreeMap<MeterId, Vec<u64>> {
        let mut out: BTreeMap<MeterId, Vec<u64>> = BTreeMap::new();
        for a in &self.accepted {
            out.entry(a.meter).or_default().push(a.ctr);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "accepted reports: {}\nalarms: {}\naggregate total (Wh): {}\nnetwork messages: {}\n",
            self.accepted.len(),
            self.alarms.len(),
            self.aggregate_total(),
            self.network_messages
        );
        let mut by_kind: BTreeMap<AlarmKind, usize> = BTreeMap::new();
        for a in &self.alarms {
            *by_kind.entry(a.kind).or_default() += 1;
        }
        for (kind, n) in by_kind {
            s.push_str(&format!("  {kind:?}: {n}\n"));
        }
        s
    }
}

enum Ev {
    Deliver { src: Node, dst: Node, bytes: Vec<u8> },
    Timer { node: Node, timer: Timer, generation: u32 },
    Report { meter: MeterId, period: u64 },
    StartInit { meter: MeterId },
    Script { index: usize },
    Boot,
}

struct ActionState {
    action: Action,
    matched: usize,
    fired: bool,
}

struct World {
    cfg: ScenarioConfig,
    tick: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    cc: ControlCenter,
    gw: Gateway,
    gw_generation: u32,
    meters: BTreeMap<MeterId, SmartMeter>,
    uds: BTreeMap<MeterId, UserDevice>,
    attestation_root: crate::crypto::VerifyKey,
    ud_rng: SimRng,
    jitter_rng: SimRng,
    actions: Vec<ActionState>,
    fifo: BTreeMap<(Node, Node), u64>,
    host_offset: i64,
    store_writes: Vec<(u64, String, usize)>,
    readings: BTreeMap<(MeterId, u64), u64>,
    log: EventLog,
    alarms: Vec<AlarmEvent>,
    accepted: Vec<AcceptedReport>,
    sent: Vec<SentReport>,
    cc_outputs: Vec<FunctionOutput>,
    network_messages: usize,
    messages_by_tag: BTreeMap<&'static str, usize>,
    captured: Vec<Vec<u8>>,
    registered: BTreeSet<MeterId>,
    error: Option<SimError>,
}

fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&sha256(bytes)[..8])
}

/// Runs one scenario to completion.
pub fn run_scenario(config: &ScenarioConfig, script: &AdversaryScript, seed: u64) -> Result<Outcome, SimError> {
    config.validate()?;
    let mut world = World::new(config.clone(), script, seed);
    world.run();
    world.finish()
}

impl World {
    fn new(cfg: ScenarioConfig, script: &AdversaryScript, seed: u64) -> Self {
        let mut master = SimRng::seed_from_u64(seed);
        let attestation = Arc::new(AttestationService::new(&mut master));
        let attestation_root = attestation.root_public();
        let timing = cfg.timing();

        let mut init_keys = Vec::new();
        let mut meters = BTreeMap::new();
        for id in cfg.meter_ids() {
            let k_init = SymKey::generate(&mut master);
            init_keys.push((id, k_init.clone()));
            meters.insert(id, SmartMeter::new(id, k_init, SimRng::seed_from_u64(master.next_u64()), timing));
        }
        let gw_measurement = Measurement::of(GATEWAY_IDENTITY);
        let cc_measurement = Measurement::of(CONTROL_IDENTITY);
        let mut cc_secret = [0u8; 32];
        master.fill_bytes(&mut cc_secret);
        let cc_enclave = Enclave::create(CONTROL_IDENTITY, &cc_secret, attestation.clone(), &mut master);
        let cc = ControlCenter::new(
            cc_enclave,
            &init_keys,
            ControlParams { gw_measurement, attestation_root, timing, wall_start_ms: cfg.wall_start_ms },
        );
        let mut gw_secret = [0u8; 32];
        master.fill_bytes(&mut gw_secret);
        let gw = Gateway::new(
            GatewayParams { cc_measurement, attestation_root, timing, grid: cfg.grid() },
            attestation,
            gw_secret.to_vec(),
            SimRng::seed_from_u64(master.next_u64()),
        );
        let mut ud_rng = SimRng::seed_from_u64(master.next_u64());
        let uds = cfg
            .meter_ids()
            .map(|id| (id, UserDevice::new(id, gw_measurement, attestation_root, SimRng::seed_from_u64(ud_rng.next_u64()), timing)))
            .collect();

        let mut reading_rng = SimRng::seed_from_u64(master.next_u64());
        let mut readings = BTreeMap::new();
        for period in 0..cfg.periods {
            for id in cfg.meter_ids() {
                let r = if cfg.sentinel_readings {
                    reading_rng.gen_range(1u64 << 40..1u64 << 48)
                } else {
                    reading_rng.gen_range(cfg.reading_min_wh..=cfg.reading_max_wh)
                };
                readings.insert((id, period), r);
            }
        }

        let mut world = World {
            tick: 0,
            seq: 0,
            queue: BTreeMap::new(),
            cc,
            gw,
            gw_generation: 0,
            meters,
            uds,
            attestation_root,
            ud_rng,
            jitter_rng: SimRng::seed_from_u64(master.next_u64()),
            actions: script.actions.iter().map(|a| ActionState { action: a.clone(), matched: 0, fired: false }).collect(),
            fifo: BTreeMap::new(),
            host_offset: 0,
            store_writes: Vec::new(),
            readings,
            log: EventLog::default(),
            alarms: Vec::new(),
            accepted: Vec::new(),
            sent: Vec::new(),
            cc_outputs: Vec::new(),
            network_messages: 0,
            messages_by_tag: BTreeMap::new(),
            captured: Vec::new(),
            registered: BTreeSet::new(),
            error: None,
            cfg,
        };
        world.schedule(0, Ev::Boot);
        for id in world.cfg.meter_ids() {
            world.schedule(world.cfg.sm_init_at_ms, Ev::StartInit { meter: id });
        }
        for period in 0..world.cfg.periods {
            for id in world.cfg.meter_ids() {
                world.schedule(world.cfg.report_tick(period), Ev::Report { meter: id, period });
            }
        }
        for index in 0..world.actions.len() {
            if let Some(at) = world.actions[index].action.scheduled_at() {
                world.schedule(at, Ev::Script { index });
            }
        }
        world
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn run(&mut self) {
        let end = self.cfg.end_tick();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > end || self.error.is_some() {
                break;
            }
            let ((tick, _), ev) = entry.remove_entry();
            self.tick = tick;
            self.step(ev);
            let known = self.store_writes.len();
            if self.gw.store().write_count() != known {
                for (label, version) in self.gw.store().writes_since(known) {
                    self.store_writes.push((tick, label, version));
                }
            }
        }
        self.tick = self.tick.max(end);
    }

    fn step(&mut self, ev: Ev) {
        let now = self.tick;
        match ev {
            Ev::Deliver { src, dst, bytes } => self.deliver(src, dst, bytes),
            Ev::Timer { node, timer, generation } => {
                let mut out = Outbox::default();
                match node {
                    Node::Gw if generation == self.gw_generation => self.gw.on_timer(now, timer, &mut out),
                    Node::Sm(id) => {
                        if let Some(m) = self.meters.get_mut(&id) {
                            m.on_timer(now, timer, &mut out);
                        }
                    }
                    Node::Ud(id) => {
                        if let Some(u) = self.uds.get_mut(&id) {
                            u.on_timer(now, timer, &mut out);
                        }
                    }
                    _ => {}
                }
                self.apply(node, out);
            }
            Ev::Report { meter, period } => {
                let reading = self.readings[&(meter, period)];
                let mut out = Outbox::default();
                if let Some(m) = self.meters.get_mut(&meter) {
                    m.report(now, reading, &mut out);
                }
                self.apply(Node::Sm(meter), out);
            }
            Ev::StartInit { meter } => {
                let mut out = Outbox::default();
                if let Some(u) = self.uds.get_mut(&meter) {
                    u.start(&mut out);
                }
                self.apply(Node::Ud(meter), out);
            }
            Ev::Boot => {
                self.gw_generation += 1;
                let mut e = LogEvent::new(now, EventKind::Boot);
                e.src = Some(Node::Gw);
                self.log.push(e);
                let mut out = Outbox::default();
                self.gw.boot(now, &mut out);
                self.apply(Node::Gw, out);
            }
            Ev::Script { index } => self.run_action(index),
        }
    }

    fn run_action(&mut self, index: usize) {
        let now = self.tick;
        let action = self.actions[index].action.clone();
        let mut e = LogEvent::new(now, EventKind::Rollback);
        match action {
            Action::RollbackStore { label, back, .. } => {
                let store = self.gw.store();
                let Some(cur) = store.current_version(&label).filter(|&c| c >= back) else {
                    self.fail(index, format!("{label:?} has no version {back} back"));
                    return;
                };
                store.rollback(&label, cur - back).expect("version exists");
                e.detail = Some(format!("{label} v{} -> v{}", cur, cur - back));
            }
            Action::RollbackAll { to, .. } => {
                let w = self.store_writes.iter().take_while(|(t, _, _)| *t <= to).count();
                let store = self.gw.store().clone();
                let mut first: BTreeMap<String, usize> = BTreeMap::new();
                for (label, version) in store.writes_since(w) {
                    first.entry(label).or_insert(version);
                }
                if first.is_empty() {
                    self.fail(index, format!("no gateway writes after tick {to}"));
                    return;
                }
                for (label, v0) in &first {
                    if *v0 == 0 {
                        store.remove(label);
                    } else {
                        store.rollback(label, v0 - 1).expect("older version exists");
                    }
                }
                e.detail = Some(format!("{} records rewound to tick {to}", first.len()));
            }
            Action::Restart { downtime, .. } => {
                self.gw.crash();
                self.gw_generation += 1;
                e = LogEvent::new(now, EventKind::Crash);
                e.src = Some(Node::Gw);
                self.schedule(now + downtime, Ev::Boot);
            }
            Action::SetHostClock { offset_ms, .. } => {
                self.host_offset = offset_ms;
                e = LogEvent::new(now, EventKind::HostClock);
                e.detail = Some(format!("offset {offset_ms} ms"));
            }
            Action::Reregister { meter, .. } => {
                let Some(sm) = self.meters.get_mut(&meter) else {
                    self.fail(index, format!("no meter {meter}"));
                    return;
                };
                sm.begin_reregistration();
                let mut ud = UserDevice::new(
                    meter,
                    Gateway::measurement(),
                    self.attestation_root,
                    SimRng::seed_from_u64(self.ud_rng.next_u64()),
                    self.cfg.timing(),
                );
                let mut out = Outbox::default();
                ud.start(&mut out);
                self.uds.insert(meter, ud);
                e = LogEvent::new(now, EventKind::Reregister);
                e.meter = Some(meter);
                self.log.push(e);
                self.actions[index].fired = true;
                self.apply(Node::Ud(meter), out);
                return;
            }
            _ => unreachable!("only time-triggered actions are scheduled"),
        }
        self.actions[index].fired = true;
        self.log.push(e);
    }

    fn fail(&mut self, index: usize, reason: String) {
        self.error.get_or_insert(SimError::InvalidAction { index, reason });
    }

    fn deliver(&mut self, src: Node, dst: Node, bytes: Vec<u8>) {
        let now = self.tick;
        let mut e = LogEvent::new(now, EventKind::Deliver);
        e.src = Some(src);
        e.dst = Some(dst);
        e.tag = Some(wire::tag_name(bytes[0]));
        e.digest = Some(short_digest(&bytes));
        let mut out = Outbox::default();
        let delivered = match dst {
            Node::Cc => {
                self.cc.handle(now, src, &bytes, &mut out);
                true
            }
            Node::Gw => {
                if !self.gw.handle(now, src, &bytes, &mut out) {
                    e.kind = EventKind::HostDown;
                }
                true
            }
            Node::Sm(id) => self.meters.get_mut(&id).map(|m| m.handle(now, src, &bytes, &mut out)).is_some(),
            Node::Ud(id) => self.uds.get_mut(&id).map(|u| u.handle(now, src, &bytes, &mut out)).is_some(),
        };
        if !delivered {
            e.kind = EventKind::Undeliverable;
        }
        self.log.push(e);
        self.apply(dst, out);
    }

    fn apply(&mut self, node: Node, out: Outbox) {
        let now = self.tick;
        for alarm in out.alarms {
            let mut e = LogEvent::new(now, EventKind::Alarm);
            e.src = Some(node);
            e.alarm = Some(AlarmFields { kind: alarm.kind, meter_id: alarm.meter_id });
            e.detail = Some(alarm.detail.to_string());
            self.log.push(e);
            self.alarms.push(AlarmEvent {
                tick: now,
                source: node,
                kind: alarm.kind,
                meter_id: alarm.meter_id,
                detail: alarm.detail,
            });
        }
        for note in out.notes {
            self.record_note(node, note);
        }
        for (dst, bytes) in out.sends {
            self.route(node, dst, bytes);
        }
        for (delay, timer) in out.timers {
            let generation = if node == Node::Gw { self.gw_generation } else { 0 };
            self.schedule(now + delay, Ev::Timer { node, timer, generation });
        }
    }

    fn record_note(&mut self, node: Node, note: Note) {
        let now = self.tick;
        let mut e = LogEvent::new(now, EventKind::Ignored);
        e.src = Some(node);
        match note {
            Note::ReportSent { meter, ctr, reading } => {
                e.kind = EventKind::ReportSent;
                (e.meter, e.ctr, e.reading) = (Some(meter), Some(ctr), Some(reading));
                self.sent.push(SentReport { tick: now, meter, ctr, reading });
            }
            Note::Accepted { meter, ctr, reading, period } => {
                e.kind = EventKind::Accepted;
                (e.meter, e.ctr, e.reading, e.period) = (Some(meter), Some(ctr), Some(reading), Some(period));
                self.accepted.push(AcceptedReport { tick: now, meter, ctr, reading, period });
            }
            Note::Registered { meter } => {
                e.kind = EventKind::Registered;
                e.meter = Some(meter);
                self.registered.insert(meter);
            }
            Note::RegistrationRefused { meter } => {
                e.kind = EventKind::RegistrationRefused;
                e.meter = Some(meter);
            }
            Note::MeterReady { meter } => {
                e.kind = EventKind::MeterReady;
                e.meter = Some(meter);
            }
            Note::LinkEstablished => e.kind = EventKind::LinkEstablished,
            Note::Restored => e.kind = EventKind::Restored,
            Note::Halted { meter } => {
                e.kind = EventKind::Halted;
                e.meter = Some(meter);
            }
            Note::OutputsAtCc { seq, records } => {
                e.kind = EventKind::Outputs;
                e.detail = Some(format!("seq {seq}, {} records", records.len()));
                self.cc_outputs.extend(records);
            }
            Note::PriceReceived { meter, day } => {
                e.kind = EventKind::PriceReceived;
                e.meter = Some(meter);
                e.detail = Some(format!("day {day}"));
            }
            Note::Ignored { reason } => e.detail = Some(reason.to_string()),
        }
        self.log.push(e);
    }

    fn route(&mut self, src: Node, dst: Node, bytes: Vec<u8>) {
        let now = self.tick;
        let tag = bytes[0];
        let digest = short_digest(&bytes);
        let mut e = LogEvent::new(now, EventKind::Send);
        e.src = Some(src);
        e.dst = Some(dst);
        e.tag = Some(wire::tag_name(tag));
        e.digest = Some(digest.clone());
        self.log.push(e.clone());
        if !wire::is_local(tag) {
            self.network_messages += 1;
            *self.messages_by_tag.entry(wire::tag_name(tag)).or_default() += 1;
        }
        if self.cfg.capture_bytes {
            self.captured.push(bytes.clone());
        }

        let mut delivered = bytes.clone();
        let mut dropped = false;
        let mut extra_delay = 0;
        for st in &mut self.actions {
            let Some(sel) = st.action.selector() else { continue };
            if !sel.matches(src, dst, tag) {
                continue;
            }
            let n = st.matched;
            st.matched += 1;
            if n < sel.ordinal || n >= sel.ordinal + st.action.span() {
                continue;
            }
            st.fired = true;
            let mut ae = e.clone();
            match &st.action {
                Action::Drop { .. } => {
                    ae.kind = EventKind::Drop;
                    dropped = true;
                }
                Action::Replay { after, .. } => {
                    ae.kind = EventKind::Replay;
                    ae.detail = Some(format!("copy delivered at {}", now + after));
                    self.seq += 1;
                    self.queue.insert((now + after, self.seq), Ev::Deliver { src, dst, bytes: bytes.clone() });
                }
                Action::Tamper { bit, .. } => {
                    let bit = bit % (delivered.len() * 8);
                    delivered[bit / 8] ^= 1 << (bit % 8);
                    ae.kind = EventKind::Tamper;
                    ae.detail = Some(format!("bit {bit}"));
                }
                Action::Delay { ticks, .. } => {
                    ae.kind = EventKind::Delay;
                    ae.detail = Some(format!("{ticks} ticks"));
                    extra_delay += ticks;
                }
                _ => unreachable!("only message actions have selectors"),
            }
            self.log.push(ae);
        }
        if dropped {
            return;
        }
        let jitter = if self.cfg.jitter_ms > 0 { self.jitter_rng.gen_range(0..=self.cfg.jitter_ms) } else { 0 };
        let mut at = now + self.cfg.latency_ms + jitter + extra_delay;
        if extra_delay == 0 {
            let last = self.fifo.entry((src, dst)).or_default();
            at = at.max(*last);
            *last = at;
        }
        self.schedule(at, Ev::Deliver { src, dst, bytes: delivered });
    }

    fn finish(mut self) -> Result<Outcome, SimError> {
        if let Some(err) = self.error.take() {
            return Err(err);
        }
        if let Some((index, st)) = self.actions.iter().enumerate().find(|(_, st)| !st.fired) {
            return Err(SimError::ActionNeverFired { index, action: format!("{:?}", st.action) });
        }
        if self.cfg.capture_bytes {
            self.captured.extend(self.gw.store().all_bytes());
            self.captured.extend(self.cc.store().all_bytes());
        }
        let end = self.tick;
        Ok(Outcome {
            alarms: self.alarms,
            accepted: self.accepted,
            sent: self.sent,
            cc_outputs: self.cc_outputs,
            network_messages: self.network_messages,
            messages_by_tag: self.messages_by_tag,
            captured: self.captured,
            registered: self.registered.into_iter().collect(),
            halted: self.gw.halted(),
            gateway_phase: self.gw.phase(),
            gateway_launches: self.gw.launches(),
            end_tick: end,
            cc_time_at_end: self.cc.wall_time(end),
            ge_time_at_end: self.gw.enclave_time(end),
            host_time_at_end: (self.cfg.wall_start_ms + end) as i128 + self.host_offset as i128,
            store_writes: self.store_writes,
            log: self.log,
        })
    }
}
