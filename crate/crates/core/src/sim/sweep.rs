//! Exhaustive single-action attack sweep.
//!
//! Every network message of an honest run is dropped, replayed and tampered
//! with in turn, and every sealed record is rolled back one version before
//! each report period. Each attacked run must leave the accepted state
//! unchanged or raise an alarm of the type matching the attack.

use std::collections::BTreeSet;

use crate::protocols::{wire, AlarmKind, Node};

use super::{run_scenario, AdversaryScript, EventKind, Outcome, ScenarioConfig, Selector, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionClass {
    Drop,
    Replay,
    Tamper,
    RollbackStore,
}

impl ActionClass {
    /// Alarm kinds that correctly describe a detected attack of this class.
    pub fn expected_alarms(self) -> &'static [AlarmKind] {
        match self {
            ActionClass::Drop => &[AlarmKind::Freshness, AlarmKind::Rollback],
            ActionClass::Replay => &[AlarmKind::Replay, AlarmKind::DoubleReg],
            ActionClass::Tamper => &[AlarmKind::Tamper, AlarmKind::Unknown],
            ActionClass::RollbackStore => &[AlarmKind::Rollback, AlarmKind::Restore],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Case {
    pub class: ActionClass,
    pub name: String,
    pub script: AdversaryScript,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Accepted state identical to the honest run.
    Unchanged,
    /// Accepted state differs and a correctly typed alarm was raised.
    Detected,
    /// Accepted state differs without a correctly typed alarm.
    SilentChange,
    /// A reading was accepted that no meter sent, or a counter twice.
    Corrupted,
    Failed(SimError),
}

impl Verdict {
    pub fn is_sound(&self) -> bool {
        matches!(self, Verdict::Unchanged | Verdict::Detected)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case: Case,
    pub verdict: Verdict,
    pub alarms: Vec<AlarmKind>,
}

impl CaseResult {
    /// Alarms whose type does not match the attack class.
    pub fn mistyped(&self) -> Vec<AlarmKind> {
        let expected = self.case.class.expected_alarms();
        self.alarms.iter().copied().filter(|k| !expected.contains(k)).collect()
    }
}

/// Evenly spaced bit positions across a message, starting with its first bit.
pub fn tamper_bits(len: usize, positions: usize) -> Vec<usize> {
    let bits = len * 8;
    let mut out: Vec<usize> = (0..positions).map(|j| j * bits / positions).collect();
    out.dedup();
    out
}

/// All single-action scripts derived from an honest run of `cfg`.
pub fn enumerate_cases(cfg: &ScenarioConfig, honest: &Outcome, tamper_positions: usize) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut seen: std::collections::BTreeMap<(Node, Node, u8), usize> = Default::default();
    let end = cfg.end_tick();
    let replay_after = cfg.period_ms + 10;

    let sends: Vec<_> = honest.log.of_kind(EventKind::Send).collect();
    let lengths = honest_lengths(cfg, honest);
    for (i, e) in sends.iter().enumerate() {
        let (src, dst) = (e.src.unwrap(), e.dst.unwrap());
        let tag = wire::tag_from_name(e.tag.unwrap()).unwrap();
        let ordinal = {
            let n = seen.entry((src, dst, tag)).or_default();
            *n += 1;
            *n - 1
        };
        if wire::is_local(tag) {
            continue;
        }
        let sel = Selector::new(src, dst, tag, ordinal);
        let what = format!("{} {src}->{dst} #{ordinal}", wire::tag_name(tag));
        cases.push(Case { class: ActionClass::Drop, name: format!("drop {what}"), script: AdversaryScript::new().drop(sel, 1) });
        if tag == wire::REPORT {
            cases.push(Case {
                class: ActionClass::Drop,
                name: format!("drop {what} and its retry"),
                script: AdversaryScript::new().drop(sel, 2),
            });
        }
        if e.tick + replay_after <= end {
            cases.push(Case {
                class: ActionClass::Replay,
                name: format!("replay {what}"),
                script: AdversaryScript::new().replay(sel, replay_after),
            });
        }
        for bit in tamper_bits(lengths[i], tamper_positions) {
            cases.push(Case {
                class: ActionClass::Tamper,
                name: format!("tamper {what} bit {bit}"),
                script: AdversaryScript::new().tamper(sel, bit),
            });
        }
    }

    for period in 1..cfg.periods {
        let at = cfg.report_tick(period) - 1;
        let mut labels: BTreeSet<&str> = BTreeSet::new();
        for (tick, label, version) in &honest.store_writes {
            if *tick <= at && *version >= 1 {
                labels.insert(label);
            }
        }
        for label in labels {
            cases.push(Case {
                class: ActionClass::RollbackStore,
                name: format!("rollback {label} before period {period}"),
                script: AdversaryScript::new().rollback(label, 1, at),
            });
        }
    }
    cases
}

/// Message lengths of the honest run, aligned with its send events.
fn honest_lengths(cfg: &ScenarioConfig, honest: &Outcome) -> Vec<usize> {
    if cfg.capture_bytes {
        return honest.captured.iter().take(honest.log.of_kind(EventKind::Send).count()).map(Vec::len).collect();
    }
    let captured = ScenarioConfig { capture_bytes: true, ..cfg.clone() };
    let run = run_scenario(&captured, &AdversaryScript::new(), cfg.seed).expect("honest run");
    run.captured.iter().take(run.log.of_kind(EventKind::Send).count()).map(Vec::len).collect()
}

pub fn judge(honest: &Outcome, attacked: &Outcome, class: ActionClass) -> Verdict {
    let sent = attacked.sent_state();
    let mut ctrs = BTreeSet::new();
    for a in &attacked.accepted {
        if !sent.contains(&(a.meter, a.ctr, a.reading)) || !ctrs.insert((a.meter, a.ctr)) {
            return Verdict::Corrupted;
        }
    }
    if attacked.accepted_state() == honest.accepted_state() {
        return Verdict::Unchanged;
    }
    if attacked.alarms.iter().any(|a| class.expected_alarms().contains(&a.kind)) {
        Verdict::Detected
    } else {
        Verdict::SilentChange
    }
}

pub fn run_case(cfg: &ScenarioConfig, honest: &Outcome, case: &Case) -> CaseResult {
    let (verdict, alarms) = match run_scenario(cfg, &case.script, cfg.seed) {
        Ok(out) => (judge(honest, &out, case.class), out.alarms.iter().map(|a| a.kind).collect()),
        Err(e) => (Verdict::Failed(e), Vec::new()),
    };
    CaseResult { case: case.clone(), verdict, alarms }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{wire, Node};
    use crate::sim::Selector;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig { meters: 2, periods: 3, ..Default::default() }
    }

    #[test]
    fn tamper_positions_are_spread_and_distinct() {
        assert_eq!(tamper_bits(10, 4), vec![0, 20, 40, 60]);
        assert_eq!(tamper_bits(1, 20), (0..8).collect::<Vec<_>>());
        let bits = tamper_bits(100, 20);
        assert_eq!(bits.len(), 20);
        assert!(bits.iter().all(|&b| b < 800));
    }

    #[test]
    fn honest_run_is_unchanged() {
        let c = cfg();
        let honest = run_scenario(&c, &AdversaryScript::new(), c.seed).unwrap();
        assert_eq!(judge(&honest, &honest, ActionClass::Drop), Verdict::Unchanged);
    }

    // negative controls: the judge must see through a silenced or forged outcome
    #[test]
    fn silenced_attack_is_a_silent_change() {
        let c = cfg();
        let honest = run_scenario(&c, &AdversaryScript::new(), c.seed).unwrap();
        let sel = Selector::new(Node::Sm(1), Node::Gw, wire::REPORT, 0);
        let mut attacked = run_scenario(&c, &AdversaryScript::new().drop(sel, 2), c.seed).unwrap();
        assert_eq!(judge(&honest, &attacked, ActionClass::Drop), Verdict::Detected);
        attacked.alarms.clear();
        assert_eq!(judge(&honest, &attacked, ActionClass::Drop), Verdict::SilentChange);
    }

    #[test]
    fn wrongly_typed_alarm_does_not_count() {
        let c = cfg();
        let honest = run_scenario(&c, &AdversaryScript::new(), c.seed).unwrap();
        let sel = Selector::new(Node::Sm(1), Node::Gw, wire::REPORT, 0);
        let attacked = run_scenario(&c, &AdversaryScript::new().drop(sel, 2), c.seed).unwrap();
        assert_eq!(judge(&honest, &attacked, ActionClass::Tamper), Verdict::SilentChange);
    }

    #[test]
    fn forged_or_duplicated_acceptance_is_corruption() {
        let c = cfg();
        let honest = run_scenario(&c, &AdversaryScript::new(), c.seed).unwrap();
        let mut forged = honest.clone();
        forged.accepted[0].reading += 1;
        assert_eq!(judge(&honest, &forged, ActionClass::Tamper), Verdict::Corrupted);
        let mut doubled = honest.clone();
        let again = doubled.accepted[0];
        doubled.accepted.push(again);
        assert_eq!(judge(&honest, &doubled, ActionClass::Replay), Verdict::Corrupted);
    }

    #[test]
    fn every_class_is_enumerated() {
        let c = cfg();
        let honest = run_scenario(&c, &AdversaryScript::new(), c.seed).unwrap();
        let cases = enumerate_cases(&c, &honest, 4);
        for class in [ActionClass::Drop, ActionClass::Replay, ActionClass::Tamper, ActionClass::RollbackStore] {
            assert!(cases.iter().any(|k| k.class == class), "{class:?}");
        }
        let names: BTreeSet<_> = cases.iter().map(|k| k.name.clone()).collect();
        assert_eq!(names.len(), cases.len());
    }
}
