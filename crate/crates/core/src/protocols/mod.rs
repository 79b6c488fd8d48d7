//! The four SecGrid protocols as message-driven state machines.
//!
//! Entities never touch the network directly. Each handler receives the
//! current tick and an [`Outbox`] and reports what it wants sent, which
//! timers it wants armed, which alarms it raises and which observable
//! milestones occurred. The simulator in [`crate::sim`] owns delivery.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::functions::output::FunctionOutput;

pub mod channel;
pub mod control;
pub mod gateway;
pub mod meter;
pub mod wire;

pub type MeterId = u64;
pub type Nonce = [u8; 16];

/// Entity addresses on the simulated bus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Cc,
    Gw,
    Sm(MeterId),
    Ud(MeterId),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Cc => f.write_str("cc"),
            Node::Gw => f.write_str("gw"),
            Node::Sm(id) => write!(f, "sm:{id}"),
            Node::Ud(id) => write!(f, "ud:{id}"),
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Node {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_id = |v: &str| v.parse::<u64>().map_err(|e| format!("bad meter id in {s:?}: {e}"));
        match s.split_once(':') {
            None if s == "cc" => Ok(Node::Cc),
            None if s == "gw" => Ok(Node::Gw),
            Some(("sm", id)) => Ok(Node::Sm(parse_id(id)?)),
            Some(("ud", id)) => Ok(Node::Ud(parse_id(id)?)),
            _ => Err(format!("unknown node {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlarmKind {
    Tamper,
    Replay,
    Rollback,
    Freshness,
    Unknown,
    Restore,
    DoubleReg,
}

/// Alarm code carried in ALARM records for arithmetic overflow inside a
/// function. It has no [`AlarmKind`].
pub const OVERFLOW_ALARM_CODE: u8 = 8;

impl AlarmKind {
    pub const ALL: [AlarmKind; 7] = [
        AlarmKind::Tamper,
        AlarmKind::Replay,
        AlarmKind::Rollback,
        AlarmKind::Freshness,
        AlarmKind::Unknown,
        AlarmKind::Restore,
        AlarmKind::DoubleReg,
    ];

    pub fn code(self) -> u8 {
        match self {
            AlarmKind::Tamper => 1,
            AlarmKind::Replay => 2,
            AlarmKind::Rollback => 3,
            AlarmKind::Freshness => 4,
            AlarmKind::Unknown => 5,
            AlarmKind::Restore => 6,
            AlarmKind::DoubleReg => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<AlarmKind> {
        AlarmKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Alarms after which the gateway stops accepting reports from the meter.
    pub fn halts_meter(self) -> bool {
        matches!(self, AlarmKind::Rollback | AlarmKind::Restore)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub meter_id: Option<MeterId>,
    pub detail: &'static str,
}

impl Alarm {
    pub fn new(kind: AlarmKind, meter_id: Option<MeterId>, detail: &'static str) -> Self {
        Alarm { kind, meter_id, detail }
    }
}

/// Observable milestones, used by the simulator's event log and by tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Note {
    ReportSent { meter: MeterId, ctr: u64, reading: u64 },
    Accepted { meter: MeterId, ctr: u64, reading: u64, period: u64 },
    Registered { meter: MeterId },
    RegistrationRefused { meter: MeterId },
    MeterReady { meter: MeterId },
    LinkEstablished,
    Restored,
    Halted { meter: MeterId },
    OutputsAtCc { seq: u64, records: Vec<FunctionOutput> },
    PriceReceived { meter: MeterId, day: u32 },
    Ignored { reason: &'static str },
}

/// Timer identities. Handlers re-check their state when a timer fires, so a
/// stale timer is harmless.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timer {
    GwAttest { attempt: u8 },
    TimeEcho { attempt: u8 },
    Channel { seq: u64, attempt: u8 },
    Echo { meter: MeterId, attempt: u8 },
    Restore { attempt: u8 },
    WindowClose { period: u64 },
    ReportRetry { ctr: u64 },
    UdStep { step: u8, attempt: u8 },
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(Node, Vec<u8>)>,
    pub alarms: Vec<Alarm>,
    pub notes: Vec<Note>,
    pub timers: Vec<(u64, Timer)>,
}

impl Outbox {
    pub fn send(&mut self, dst: Node, bytes: Vec<u8>) {
        self.sends.push((dst, bytes));
    }

    pub fn alarm(&mut self, kind: AlarmKind, meter_id: Option<MeterId>, detail: &'static str) {
        self.alarms.push(Alarm::new(kind, meter_id, detail));
    }

    pub fn note(&mut self, note: Note) {
        self.notes.push(note);
    }

    pub fn ignore(&mut self, reason: &'static str) {
        self.notes.push(Note::Ignored { reason });
    }

    pub fn timer(&mut self, delay: u64, timer: Timer) {
        self.timers.push((delay, timer));
    }
}

/// Timing knobs shared by every entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    /// Wait before an unanswered request is sent again, and again before
    /// giving up.
    pub retry_timeout: u64,
    /// Largest accepted difference between the gateway's echoed time and the
    /// control enclave's clock.
    pub time_tolerance: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { retry_timeout: 100, time_tolerance: 5_000 }
    }
}

pub(crate) fn nonce_plus_one(n: &Nonce) -> Nonce {
    u128::from_be_bytes(*n).wrapping_add(1).to_be_bytes()
}
