use secgrid_core::crypto::iv_audit;
use secgrid_core::functions::output::FunctionOutput;
use secgrid_core::protocols::gateway::PhaseName;
use secgrid_core::protocols::{wire, AlarmKind, Node};
use secgrid_core::sim::{run_scenario, AdversaryScript, EventKind, Outcome, ScenarioConfig, Selector};

const DAY_MS: i64 = 86_400_000;

fn cfg(meters: u64, periods: u64) -> ScenarioConfig {
    ScenarioConfig { meters, periods, ..Default::default() }
}

fn run(cfg: &ScenarioConfig, script: AdversaryScript) -> Outcome {
    run_scenario(cfg, &script, cfg.seed).unwrap()
}

fn report_sel(meter: u64, ordinal: usize) -> Selector {
    Selector::new(Node::Sm(meter), Node::Gw, wire::REPORT, ordinal)
}

#[test]
fn honest_five_by_ten() {
    let out = run(&cfg(5, 10), AdversaryScript::new());
    assert!(out.alarms.is_empty(), "{:?}", out.alarms);
    assert_eq!(out.accepted.len(), 50);
    let sent: u128 = out.sent.iter().map(|s| s.reading as u128).sum();
    assert_eq!(out.aggregate_total(), sent);
    for ctrs in out.accepted_ctrs().values() {
        assert_eq!(ctrs, &(1..=10).collect::<Vec<_>>());
    }
}

#[test]
fn honest_runs_raise_no_alarms_for_any_seed() {
    for seed in 0..20 {
        let c = ScenarioConfig { seed, ..cfg(3, 4) };
        let out = run(&c, AdversaryScript::new());
        assert!(out.alarms.is_empty(), "seed {seed}: {:?}", out.alarms);
        assert_eq!(out.accepted.len(), 12);
    }
}

#[test]
fn init_message_counts() {
    let out = run(&cfg(1, 0), AdversaryScript::new());
    let count = |names: &[&str]| names.iter().map(|n| out.messages_by_tag.get(n).copied().unwrap_or(0)).sum::<usize>();
    assert_eq!(count(&["gw_attest", "cc_attest", "time_echo", "init_ack"]), 4);
    assert_eq!(
        count(&["attest_request", "gw_quote", "init_prime", "get_init_key", "init_key_resp", "done", "echo", "ack"]),
        8
    );
    assert_eq!(out.network_messages, 12);
    assert_eq!(out.registered, vec![1]);
}

#[test]
fn replayed_report_raises_one_replay_alarm() {
    let c = cfg(5, 10);
    let script = AdversaryScript::new().replay(report_sel(3, 4), c.period_ms + 10);
    let out = run(&c, script);
    assert_eq!(out.alarms.len(), 1, "{:?}", out.alarms);
    assert_eq!((out.alarms[0].kind, out.alarms[0].meter_id), (AlarmKind::Replay, Some(3)));
    assert_eq!(out.accepted.len(), 50);
}

#[test]
fn copy_of_latest_report_gets_the_stored_response() {
    let c = cfg(2, 4);
    let out = run(&c, AdversaryScript::new().replay(report_sel(2, 1), c.period_ms / 3));
    assert!(out.alarms.is_empty(), "{:?}", out.alarms);
    assert_eq!(out.accepted.len(), 8);
    let responses = out.log.of_kind(EventKind::Send).filter(|e| e.tag == Some("report_response")).count();
    assert_eq!(responses, 9);
}

#[test]
fn session_rollback_detected_at_next_report() {
    let c = cfg(5, 10);
    let script = AdversaryScript::new().rollback("meter/3/session", 1, c.report_tick(6) - 10);
    let out = run(&c, script);
    let rollback: Vec<_> = out.alarms.iter().filter(|a| a.kind == AlarmKind::Rollback).collect();
    assert_eq!(rollback.len(), 1);
    assert_eq!(rollback[0].meter_id, Some(3));
    assert!(rollback[0].tick >= c.report_tick(6) && rollback[0].tick < c.report_tick(7));
    assert_eq!(out.halted, vec![3]);
    assert!(out.accepted.iter().all(|a| a.meter != 3 || a.ctr <= 6));
}

#[test]
fn lost_response_is_answered_idempotently() {
    let c = cfg(2, 4);
    let sel = Selector::new(Node::Gw, Node::Sm(1), wire::REPORT_RESPONSE, 1);
    let out = run(&c, AdversaryScript::new().drop(sel, 1));
    assert!(out.alarms.is_empty(), "{:?}", out.alarms);
    assert_eq!(out.accepted.len(), 8);
    assert_eq!(out.log.of_kind(EventKind::Accepted).count(), 8);
}

#[test]
fn report_lost_with_its_retry_is_detected() {
    let c = cfg(2, 4);
    let out = run(&c, AdversaryScript::new().drop(report_sel(2, 1), 2));
    assert!(out.alarms.iter().any(|a| a.kind == AlarmKind::Freshness && a.source == Node::Sm(2)));
    assert!(out.alarms.iter().any(|a| a.kind == AlarmKind::Rollback && a.meter_id == Some(2)));
}

#[test]
fn flipped_report_bit_raises_tamper() {
    let c = cfg(2, 3);
    let out = run(&c, AdversaryScript::new().tamper(report_sel(1, 0), 8 * 30));
    assert_eq!(out.alarms.len(), 1);
    assert_eq!((out.alarms[0].kind, out.alarms[0].meter_id), (AlarmKind::Tamper, Some(1)));
    // the meter's retry carries the untouched report
    assert_eq!(out.accepted.len(), 6);
}

#[test]
fn replayed_window_forward_alarms_at_cc() {
    let c = cfg(2, 3);
    let sel = Selector::new(Node::Gw, Node::Cc, wire::WINDOW_FORWARD, 0);
    let out = run(&c, AdversaryScript::new().replay(sel, c.period_ms + 10));
    assert_eq!(out.alarms.len(), 1);
    assert_eq!((out.alarms[0].kind, out.alarms[0].source), (AlarmKind::Replay, Node::Cc));
}

#[test]
fn tampered_window_forward_alarms_at_cc() {
    let c = cfg(2, 3);
    let sel = Selector::new(Node::Gw, Node::Cc, wire::WINDOW_FORWARD, 1);
    let out = run(&c, AdversaryScript::new().tamper(sel, 100));
    assert_eq!(out.alarms.len(), 1);
    assert_eq!((out.alarms[0].kind, out.alarms[0].source), (AlarmKind::Tamper, Node::Cc));
    let aggs = out.cc_outputs.iter().filter(|o| matches!(o, FunctionOutput::Agg { .. })).count();
    assert_eq!(aggs, 3);
}

#[test]
fn cc_outputs_carry_no_raw_readings() {
    let c = cfg(3, 8);
    let out = run(&c, AdversaryScript::new());
    let aggs: Vec<u64> = out
        .cc_outputs
        .iter()
        .filter_map(|o| match o {
            FunctionOutput::Agg { total, .. } => Some(*total),
            _ => None,
        })
        .collect();
    assert_eq!(aggs.len(), 8);
    assert!(out.cc_outputs.iter().any(|o| matches!(o, FunctionOutput::Bill { .. })));
    assert!(out.cc_outputs.iter().any(|o| matches!(o, FunctionOutput::Forecast { .. })));
    for p in 0..8u64 {
        let expected: u64 = out.accepted.iter().filter(|a| a.period == p).map(|a| a.reading).sum();
        assert_eq!(aggs[p as usize], expected);
    }
}

#[test]
fn day_end_broadcasts_prices_to_meters() {
    let c = ScenarioConfig { period_ms: 3_600_000, ..cfg(2, 24) };
    let out = run(&c, AdversaryScript::new());
    assert!(out.alarms.is_empty(), "{:?}", out.alarms);
    assert!(out.cc_outputs.iter().any(|o| matches!(o, FunctionOutput::Price(p) if p.day == c.start_day + 1)));
    assert_eq!(out.log.of_kind(EventKind::PriceReceived).count(), 2);
}

#[test]
fn time_echo_beyond_tolerance_is_rejected() {
    let c = cfg(1, 1);
    let sel = Selector::new(Node::Gw, Node::Cc, wire::TIME_ECHO, 0);
    let out = run(&c, AdversaryScript::new().delay(sel, 6_000, 2));
    assert!(out.alarms.iter().any(|a| a.kind == AlarmKind::Freshness && a.source == Node::Cc));
    assert_eq!(out.log.of_kind(EventKind::LinkEstablished).count(), 0);
    assert!(out.accepted.is_empty());
}

#[test]
fn host_clock_never_reaches_enclave_time() {
    let c = cfg(2, 3);
    let honest = run(&c, AdversaryScript::new());
    assert_eq!(honest.ge_time_at_end, Some(honest.cc_time_at_end));
    for script in [
        AdversaryScript::new().set_host_clock(c.setup_ms + 5, DAY_MS),
        AdversaryScript::new().set_host_clock(c.setup_ms + 5, -DAY_MS),
        AdversaryScript::new().set_host_clock(0, DAY_MS),
    ] {
        let out = run(&c, script);
        assert!(out.alarms.is_empty());
        assert_eq!(out.ge_time_at_end, honest.ge_time_at_end);
        assert_ne!(out.host_time_at_end, out.cc_time_at_end as i128);
        assert_eq!(out.accepted_state(), honest.accepted_state());
    }
}

#[test]
fn restart_between_periods_restores_every_session() {
    let c = cfg(4, 6);
    let at = c.report_tick(2) + 5_000;
    let out = run(&c, AdversaryScript::new().restart(at, 2_000));
    assert!(out.alarms.is_empty(), "{:?}", out.alarms);
    assert_eq!(out.log.of_kind(EventKind::Restored).count(), 1);
    assert_eq!(out.gateway_phase, PhaseName::Operational);
    assert_eq!(out.gateway_launches, 2);
    assert_eq!(out.accepted.len(), 24);
    assert_eq!(out.ge_time_at_end, Some(out.cc_time_at_end));
}

#[test]
fn restart_over_a_report_accepts_the_missed_counter() {
    let c = cfg(8, 6);
    let at = c.report_tick(3) - 500;
    let out = run(&c, AdversaryScript::new().restart(at, 5_000));
    assert!(out.alarms.iter().all(|a| a.kind == AlarmKind::Freshness && matches!(a.source, Node::Sm(_))));
    assert_eq!(out.log.of_kind(EventKind::Restored).count(), 1);
    // every meter's fourth report arrives through the restart protocol
    assert_eq!(out.accepted.len(), 48);
    for ctrs in out.accepted_ctrs().values() {
        assert_eq!(ctrs, &(1..=6).collect::<Vec<_>>());
    }
    let m7 = out.accepted.iter().find(|a| a.meter == 7 && a.ctr == 4).unwrap();
    assert!(m7.tick > at + 5_000);
}

#[test]
fn restart_after_two_period_rollback_alarms() {
    let c = cfg(3, 6);
    let script = AdversaryScript::new()
        .rollback_all(c.report_tick(2) - 100, c.report_tick(4) - 600)
        .restart(c.report_tick(4) - 500, 1_000);
    let out = run(&c, script);
    let restore: Vec<_> = out.alarms.iter().filter(|a| a.kind == AlarmKind::Restore).collect();
    assert_eq!(restore.len(), 3, "{:?}", out.alarms);
    assert_eq!(out.halted, vec![1, 2, 3]);
}

#[test]
fn restart_without_control_centre_time_alarms() {
    let c = cfg(2, 4);
    let sel = Selector::new(Node::Gw, Node::Cc, wire::TIME_REQUEST, 0);
    let script = AdversaryScript::new().restart(c.report_tick(1) + 5_000, 1_000).drop(sel, 2);
    let out = run(&c, script);
    assert!(out.alarms.iter().any(|a| a.kind == AlarmKind::Restore && a.source == Node::Gw));
    assert_eq!(out.gateway_phase, PhaseName::Failed);
}

#[test]
fn reregistering_a_meter_is_refused() {
    let c = cfg(3, 3);
    let out = run(&c, AdversaryScript::new().reregister(2, c.report_tick(1) + 1_000));
    assert_eq!(out.alarms.len(), 1, "{:?}", out.alarms);
    assert_eq!((out.alarms[0].kind, out.alarms[0].meter_id), (AlarmKind::DoubleReg, Some(2)));
    assert_eq!(out.log.of_kind(EventKind::RegistrationRefused).count(), 1);
    assert_eq!(out.accepted.len(), 9);
}

#[test]
fn replayed_init_prime_is_a_double_registration() {
    let c = cfg(2, 2);
    let sel = Selector::new(Node::Ud(1), Node::Gw, wire::INIT_PRIME, 0);
    let out = run(&c, AdversaryScript::new().replay(sel, 5_000));
    assert_eq!(out.alarms.len(), 1);
    assert_eq!((out.alarms[0].kind, out.alarms[0].meter_id), (AlarmKind::DoubleReg, Some(1)));
    assert_eq!(out.accepted.len(), 4);
}

#[test]
fn readings_never_appear_in_the_clear() {
    let c = ScenarioConfig { sentinel_readings: true, capture_bytes: true, ..cfg(4, 6) };
    let script = AdversaryScript::new().restart(c.report_tick(3) - 500, 3_000);
    let out = run(&c, script);
    assert_eq!(out.accepted.len(), 24);
    assert!(out.captured.len() > 100);
    for s in &out.sent {
        for needle in [s.reading.to_be_bytes(), s.reading.to_le_bytes()] {
            // the top two bytes of a sentinel are zero, so match the six significant ones
            let core = if needle[0] == 0 { &needle[2..] } else { &needle[..6] };
            for blob in &out.captured {
                assert!(!blob.windows(core.len()).any(|w| w == core), "reading {} leaked", s.reading);
            }
        }
    }
}

#[test]
fn no_key_and_iv_pair_repeats() {
    let c = cfg(3, 5);
    let scripts = [
        AdversaryScript::new(),
        AdversaryScript::new().restart(c.report_tick(2) - 500, 2_000),
        AdversaryScript::new().rollback("meter/2/session", 1, c.report_tick(3) - 10),
        AdversaryScript::new()
            .restart(c.report_tick(3) + 5_000, 1_000)
            .rollback("meter/1/session", 1, c.report_tick(3) + 5_500),
        AdversaryScript::new().drop(Selector::new(Node::Gw, Node::Sm(3), wire::REPORT_RESPONSE, 2), 1),
    ];
    for script in scripts {
        // runs with one seed share keys, so each run is audited on its own
        iv_audit::start();
        run(&c, script);
        let report = iv_audit::stop();
        assert!(report.encryptions > 50);
        assert_eq!(report.duplicates, 0);
    }
}

#[test]
fn same_inputs_same_log() {
    let c = cfg(3, 4);
    let script = AdversaryScript::new().tamper(report_sel(2, 1), 200).replay(report_sel(1, 0), 1_000);
    let a = run(&c, script.clone()).log.to_jsonl();
    let b = run(&c, script).log.to_jsonl();
    assert_eq!(a, b);
    let other = run(&ScenarioConfig { seed: 1, ..c }, AdversaryScript::new()).log.to_jsonl();
    assert_ne!(a, other);
}
