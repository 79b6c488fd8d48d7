//! Adversary scripts: what the attacker (and the untrusted gateway host)
//! does during a run.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::protocols::wire;
use crate::protocols::Node;

/// Picks messages by endpoint and type. `ordinal` counts, from 0, the sent
/// messages that match the other fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<Node>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<Node>,
    #[serde(default, with = "tag_serde", skip_serializing_if = "Option::is_none")]
    pub tag: Option<u8>,
    #[serde(default)]
    pub ordinal: usize,
}

impl Selector {
    pub fn new(src: Node, dst: Node, tag: u8, ordinal: usize) -> Self {
        Selector { src: Some(src), dst: Some(dst), tag: Some(tag), ordinal }
    }

    pub fn matches(&self, src: Node, dst: Node, tag: u8) -> bool {
        self.src.is_none_or(|s| s == src) && self.dst.is_none_or(|d| d == dst) && self.tag.is_none_or(|t| t == tag)
    }
}

mod tag_serde {
    use super::*;

    pub fn serialize<S: Serializer>(tag: &Option<u8>, s: S) -> Result<S::Ok, S::Error> {
        match tag {
            Some(t) => s.serialize_str(wire::tag_name(*t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u8>, D::Error> {
        let name = String::deserialize(d)?;
        wire::tag_from_name(&name).map(Some).ok_or_else(|| serde::de::Error::custom(format!("unknown message type {name:?}")))
    }
}

/// One scripted step. Ticks are milliseconds since the start of the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Blocks `count` consecutive matching messages starting at the selector's ordinal.
    Drop {
        #[serde(flatten)]
        sel: Selector,
        #[serde(default = "one")]
        count: usize,
    },
    /// Delivers a copy of the matching message again, `after` ticks after it was sent.
    Replay {
        #[serde(flatten)]
        sel: Selector,
        after: u64,
    },
    /// Flips one bit of the matching message; `bit` is taken modulo its length.
    Tamper {
        #[serde(flatten)]
        sel: Selector,
        bit: usize,
    },
    /// Holds `count` matching messages back for an extra `ticks`.
    Delay {
        #[serde(flatten)]
        sel: Selector,
        ticks: u64,
        #[serde(default = "one")]
        count: usize,
    },
    /// Serves an older version of one sealed record from tick `at` on.
    RollbackStore { label: String, back: usize, at: u64 },
    /// Rewinds every record in the gateway store to its state at tick `to`.
    RollbackAll { to: u64, at: u64 },
    /// Crashes the gateway enclave at `at` and relaunches it `downtime` later.
    Restart { at: u64, downtime: u64 },
    /// Sets the gateway host's clock off by `offset_ms`.
    SetHostClock { at: u64, offset_ms: i64 },
    /// Runs meter registration again for an already registered meter.
    Reregister { meter: u64, at: u64 },
}

fn one() -> usize {
    1
}

impl Action {
    pub fn selector(&self) -> Option<&Selector> {
        match self {
            Action::Drop { sel, .. } | Action::Replay { sel, .. } | Action::Tamper { sel, .. } | Action::Delay { sel, .. } => {
                Some(sel)
            }
            _ => None,
        }
    }

    /// Tick at which a time-triggered action runs.
    pub fn scheduled_at(&self) -> Option<u64> {
        match self {
            Action::RollbackStore { at, .. }
            | Action::RollbackAll { at, .. }
            | Action::Restart { at, .. }
            | Action::SetHostClock { at, .. }
            | Action::Reregister { at, .. } => Some(*at),
            _ => None,
        }
    }

    /// Number of matching messages the action consumes.
    pub fn span(&self) -> usize {
        match self {
            Action::Drop { count, .. } | Action::Delay { count, .. } => *count,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryScript {
    #[serde(default, rename = "action")]
    pub actions: Vec<Action>,
}

impl AdversaryScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn drop(mut self, sel: Selector, count: usize) -> Self {
        self.actions.push(Action::Drop { sel, count });
        self
    }

    pub fn replay(mut self, sel: Selector, after: u64) -> Self {
        self.actions.push(Action::Replay { sel, after });
        self
    }

    pub fn tamper(mut self, sel: Selector, bit: usize) -> Self {
        self.actions.push(Action::Tamper { sel, bit });
        self
    }

    pub fn delay(mut self, sel: Selector, ticks: u64, count: usize) -> Self {
        self.actions.push(Action::Delay { sel, ticks, count });
        self
    }

    pub fn rollback(mut self, label: impl Into<String>, back: usize, at: u64) -> Self {
        self.actions.push(Action::RollbackStore { label: label.into(), back, at });
        self
    }

    pub fn rollback_all(mut self, to: u64, at: u64) -> Self {
        self.actions.push(Action::RollbackAll { to, at });
        self
    }

    pub fn restart(mut self, at: u64, downtime: u64) -> Self {
        self.actions.push(Action::Restart { at, downtime });
        self
    }

    pub fn set_host_clock(mut self, at: u64, offset_ms: i64) -> Self {
        self.actions.push(Action::SetHostClock { at, offset_ms });
        self
    }

    pub fn reregister(mut self, meter: u64, at: u64) -> Self {
        self.actions.push(Action::Reregister { meter, at });
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_matching() {
        let sel = Selector { src: Some(Node::Sm(3)), dst: None, tag: Some(wire::REPORT), ordinal: 0 };
        assert!(sel.matches(Node::Sm(3), Node::Gw, wire::REPORT));
        assert!(!sel.matches(Node::Sm(2), Node::Gw, wire::REPORT));
        assert!(!sel.matches(Node::Sm(3), Node::Gw, wire::ACK));
    }

    #[test]
    fn script_json_round_trip() {
        let script = AdversaryScript::new()
            .drop(Selector::new(Node::Sm(1), Node::Gw, wire::REPORT, 2), 2)
            .tamper(Selector::new(Node::Gw, Node::Cc, wire::WINDOW_FORWARD, 0), 77)
            .rollback("meter/3/session", 1, 5000)
            .restart(9000, 400);
        let json = serde_json::to_string(&script).unwrap();
        assert!(json.contains("\"tag\":\"report\""));
        assert_eq!(serde_json::from_str::<AdversaryScript>(&json).unwrap(), script);
    }

    #[test]
    fn unknown_tag_name_rejected() {
        let json = r#"{"action":[{"action":"drop","tag":"bogus"}]}"#;
        assert!(serde_json::from_str::<AdversaryScript>(json).is_err());
    }
}
