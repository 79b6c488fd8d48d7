//! Line-delimited JSON event log.

use std::io::{self, Write};

use serde::Serialize;

use crate::protocols::{AlarmKind, MeterId, Node};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Replay,
    Tamper,
    Delay,
    Undeliverable,
    HostDown,
    Alarm,
    ReportSent,
    Accepted,
    Registered,
    RegistrationRefused,
    MeterReady,
    LinkEstablished,
    Restored,
    Halted,
    Outputs,
    PriceReceived,
    Ignored,
    Crash,
    Boot,
    Rollback,
    HostClock,
    Reregister,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AlarmFields {
    pub kind: AlarmKind,
    pub meter_id: Option<MeterId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LogEvent {
    pub tick: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<Node>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dst: Option<Node>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag: Option<&'static str>,
    /// First 8 bytes of the SHA-256 of the message, hex encoded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alarm: Option<AlarmFields>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meter: Option<MeterId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctr: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reading: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl LogEvent {
    pub fn new(tick: u64, kind: EventKind) -> Self {
        LogEvent {
            tick,
            kind,
            src: None,
            dst: None,
            tag: None,
            digest: None,
            alarm: None,
            meter: None,
            ctr: None,
            reading: None,
            period: None,
            detail: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<LogEvent>,
}

impl EventLog {
    pub fn push(&mut self, event: LogEvent) {
        self.events.push(event);
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}
