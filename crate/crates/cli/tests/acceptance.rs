//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use secgrid::bench::{run_bench, Backend, BenchSpec, Function, PaillierContext, PAILLIER_BITS};
use secgrid::vectors::{check_vector, mutate, GCM_VECTORS};
use secgrid_core::crypto::{ae_decrypt, ae_encrypt_with_iv, SymKey};
use secgrid_core::functions::{
    aggregate_window_traced, compute_bill, compute_bill_traced, forecast_sts, forecast_sts_traced, price_cpp,
    price_rtp, price_rtp_traced, price_tou, rtp_predict_day, CppCalendar, DayPrices, PredictionWeights, StsModel,
    TouParams, UsageWindow, HOURS,
};
use secgrid_core::oblivious::{branching_canary, record_trace};
use secgrid_core::protocols::gateway::PhaseName;
use secgrid_core::protocols::AlarmKind;
use secgrid_core::sim::sweep::{enumerate_cases, run_case, ActionClass};
use secgrid_core::sim::{run_scenario, AdversaryScript, EventKind, ScenarioConfig};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn within(elapsed: Duration, limit_s: u64) -> Verdict {
    if elapsed >= Duration::from_secs(limit_s) {
        return Err(format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()));
    }
    Ok(format!("{:.2}s", elapsed.as_secs_f64()))
}

fn honest_end_to_end() -> Verdict {
    let cfg = ScenarioConfig { meters: 10, periods: 20, ..Default::default() };
    let start = Instant::now();
    let out = run_scenario(&cfg, &AdversaryScript::new(), cfg.seed).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(out.accepted.len() == 200, "{} reports accepted", out.accepted.len());
    ensure!(out.alarms.is_empty(), "alarms: {:?}", out.alarms);
    let brute: u128 = out.sent.iter().map(|s| s.reading as u128).sum();
    ensure!(out.aggregate_total() == brute, "aggregate {} != sent sum {brute}", out.aggregate_total());
    ensure!(out.accepted_state() == out.sent_state(), "accepted readings differ from sent readings");
    let t = within(elapsed, 5)?;
    Ok(format!("200 accepted, 0 alarms, aggregate {brute} Wh exact, {t}"))
}

fn attack_soundness() -> Verdict {
    let cfg = ScenarioConfig { meters: 3, periods: 5, seed: 11, ..Default::default() };
    let start = Instant::now();
    let honest = run_scenario(&cfg, &AdversaryScript::new(), cfg.seed).map_err(|e| e.to_string())?;
    ensure!(honest.alarms.is_empty(), "honest baseline raised alarms");
    let cases = enumerate_cases(&cfg, &honest, 20);
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let mut detected = 0;
    for case in &cases {
        *per_class.entry(format!("{:?}", case.class)).or_default() += 1;
        let r = run_case(&cfg, &honest, case);
        ensure!(r.verdict.is_sound(), "{}: {:?} with alarms {:?}", case.name, r.verdict, r.alarms);
        if r.verdict == secgrid_core::sim::sweep::Verdict::Detected {
            detected += 1;
        }
    }
    for class in [ActionClass::Drop, ActionClass::Replay, ActionClass::Tamper, ActionClass::RollbackStore] {
        ensure!(per_class.contains_key(&format!("{class:?}")), "no {class:?} scripts enumerated");
    }
    let t = within(start.elapsed(), 60)?;
    Ok(format!("{} scripts {:?}, {detected} detected, 0 silent corruptions, {t}", cases.len(), per_class))
}

fn rollback_detection() -> Verdict {
    for seed in 0..100u64 {
        let cfg = ScenarioConfig { meters: 3, periods: 6, seed, ..Default::default() };
        let meter = 1 + seed % 3;
        let period = 2 + seed % 3;
        let at = cfg.report_tick(period) - 10;
        let script = AdversaryScript::new().rollback(format!("meter/{meter}/session"), 1, at);
        let out = run_scenario(&cfg, &script, seed).map_err(|e| e.to_string())?;
        let first = out.alarms.first().ok_or(format!("seed {seed}: no alarm"))?;
        ensure!(
            first.kind == AlarmKind::Rollback
                && first.meter_id == Some(meter)
                && first.tick >= cfg.report_tick(period)
                && first.tick < cfg.report_tick(period + 1),
            "seed {seed}: first alarm {first:?}"
        );
    }
    Ok("Rollback at the next honest report in 100/100 seeded runs".into())
}

fn double_registration() -> Verdict {
    let cfg = ScenarioConfig { meters: 3, periods: 3, ..Default::default() };
    let script = AdversaryScript::new().reregister(2, cfg.report_tick(1) + 1_000);
    let a = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    let b = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    ensure!(a.log.to_jsonl() == b.log.to_jsonl(), "runs differ");
    let kinds: Vec<_> = a.alarms.iter().map(|x| (x.kind, x.meter_id)).collect();
    ensure!(kinds == vec![(AlarmKind::DoubleReg, Some(2))], "alarms {kinds:?}");
    ensure!(a.log.of_kind(EventKind::RegistrationRefused).count() == 1, "registration not refused");
    Ok("AlreadyVoid key raises DoubleReg for meter 2, identical across runs".into())
}

fn gateway_restart() -> Verdict {
    let cfg = ScenarioConfig { meters: 4, periods: 6, ..Default::default() };
    let at = cfg.report_tick(3) - 500;
    let script = AdversaryScript::new().restart(at, 5_000);
    let out = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    let again = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    ensure!(out.log.to_jsonl() == again.log.to_jsonl(), "restart run not deterministic");
    ensure!(out.log.of_kind(EventKind::Restored).count() == 1, "gateway did not restore");
    ensure!(out.gateway_phase == PhaseName::Operational, "gateway ended {:?}", out.gateway_phase);
    ensure!(
        !out.alarms.iter().any(|a| matches!(a.kind, AlarmKind::Restore | AlarmKind::Rollback)),
        "restore alarmed: {:?}",
        out.alarms
    );
    for (meter, ctrs) in out.accepted_ctrs() {
        let before: Vec<u64> = out.accepted.iter().filter(|a| a.meter == meter && a.tick < at).map(|a| a.ctr).collect();
        let old = *before.iter().max().ok_or(format!("meter {meter}: nothing accepted before the crash"))?;
        let first_after = out
            .accepted
            .iter()
            .find(|a| a.meter == meter && a.tick > at)
            .ok_or(format!("meter {meter}: nothing accepted after restart"))?;
        ensure!(
            first_after.ctr == old || first_after.ctr == old + 1,
            "meter {meter}: ctr {} after old {old}",
            first_after.ctr
        );
        ensure!(ctrs == (1..=cfg.periods).collect::<Vec<_>>(), "meter {meter}: counters {ctrs:?}");
    }

    let cfg = ScenarioConfig { meters: 3, periods: 6, ..Default::default() };
    let script = AdversaryScript::new()
        .rollback_all(cfg.report_tick(2) - 100, cfg.report_tick(4) - 600)
        .restart(cfg.report_tick(4) - 500, 1_000);
    let out = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    let again = run_scenario(&cfg, &script, cfg.seed).map_err(|e| e.to_string())?;
    ensure!(out.log.to_jsonl() == again.log.to_jsonl(), "rollback run not deterministic");
    ensure!(out.alarm_count(AlarmKind::Restore) > 0, "two-period rollback restored silently: {:?}", out.alarms);
    Ok(format!(
        "restore accepts ctr in {{old, old+1}} for every meter; two-period rollback gives {} Restore alarm(s)",
        out.alarm_count(AlarmKind::Restore)
    ))
}

fn obliviousness() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let meters = 16;
    let model = StsModel { phi_milli: vec![500, 300, 200], noise_sigma: 0.0 };
    let traces = |rng: &mut ChaCha20Rng| -> [Vec<u8>; 4] {
        let m = rng.gen_range(0..=2_000);
        let (a, b) = (rng.gen_range(1..500), rng.gen_range(1..500));
        let rtp = record_trace(|t| price_rtp_traced(t, m, a, b, 1_000)).1.to_bytes();
        let w = UsageWindow {
            area_id: 1,
            period_start: 0,
            span: 4,
            meters,
            readings: (0..meters * 4).map(|_| rng.gen_range(0..1 << 20)).collect(),
        };
        let agg = record_trace(|t| aggregate_window_traced(t, &w)).1.to_bytes();
        let hist: Vec<u64> = (0..8).map(|_| rng.gen_range(0..1 << 20)).collect();
        let noise = rng.gen_range(-1000..1000);
        let fc = record_trace(|t| forecast_sts_traced(t, &hist, &model, noise)).1.to_bytes();
        let readings: Vec<u64> = (0..HOURS).map(|_| rng.gen_range(0..5_000)).collect();
        let prices: Vec<u64> = (0..HOURS).map(|_| rng.gen_range(0..500)).collect();
        let bill = record_trace(|t| compute_bill_traced(t, &readings, &prices)).1.to_bytes();
        [rtp, agg, fc, bill]
    };
    let reference = traces(&mut rng);
    for i in 1..100 {
        let got = traces(&mut rng);
        for (name, (r, g)) in ["price_rtp", "aggregate_window", "forecast_sts", "compute_bill"].iter().zip(reference.iter().zip(&got)) {
            ensure!(r == g, "{name} trace differs on input {i}");
        }
    }
    let canary = record_trace(|t| branching_canary(t, 0, 1_000)).1.to_bytes();
    let mut caught = false;
    for _ in 1..100 {
        let secret = rng.gen_range(0..2_000);
        caught |= record_trace(|t| branching_canary(t, secret, 1_000)).1.to_bytes() != canary;
    }
    ensure!(caught, "branching canary produced identical traces");
    Ok("4 functions trace-identical over 100 inputs; canary caught".into())
}

fn formula_oracles() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let m0 = 1_000;
    for m_h in 0..=2 * m0 {
        let (a, b) = (rng.gen_range(0..1_000_000), rng.gen_range(0..1_000_000));
        let naive = if m_h < m0 { a } else { b };
        ensure!(price_rtp(m_h, a, b, m0) == naive, "price_rtp({m_h})");
    }
    const CASES: usize = 100_000;
    let weights = PredictionWeights { yesterday: 500, two_days_ago: 300, week_ago: 200 };
    for i in 0..CASES {
        let m_h = rng.gen::<u64>() >> rng.gen_range(0..64);
        let m0 = rng.gen::<u64>() >> rng.gen_range(0..64);
        let (a, b) = (rng.gen(), rng.gen());
        ensure!(price_rtp(m_h, a, b, m0) == if m_h < m0 { a } else { b }, "random price_rtp case {i}");

        let base = TouParams {
            price: rng.gen_range(0..1_000),
            peak_surcharge: rng.gen_range(0..1_000),
            peak_windows: vec![(rng.gen_range(0..600), rng.gen_range(600..720)), (rng.gen_range(720..1000), rng.gen_range(1000..1440))],
        };
        let minute = rng.gen_range(0..1440);
        let peak = base.peak_windows.iter().any(|&(s, e)| s <= minute && minute < e);
        let naive = base.price + if peak { base.peak_surcharge } else { 0 };
        ensure!(price_tou(minute, &base) == naive, "price_tou case {i}");
        let event = TouParams { price: base.price * 2, peak_surcharge: base.peak_surcharge * 3, peak_windows: vec![(0, 1440)] };
        let event_day = rng.gen_range(0..10);
        let calendar = CppCalendar { events: [(event_day, event.clone())].into() };
        let day = rng.gen_range(0..10);
        let naive = if day == event_day { event.price + event.peak_surcharge } else { naive };
        ensure!(price_cpp(day, minute, &base, &calendar) == naive, "price_cpp case {i}");

        let t = rng.gen_range(7..30u32);
        let mut history = BTreeMap::new();
        for d in [t - 1, t - 2, t - 7] {
            let mut p = DayPrices { a: [0; HOURS], b: [0; HOURS] };
            for h in 0..HOURS {
                p.a[h] = rng.gen_range(0..1 << 40);
                p.b[h] = rng.gen_range(0..1 << 40);
            }
            history.insert(d, p);
        }
        let pred = rtp_predict_day(&history, t, weights).map_err(|e| e.to_string())?;
        for h in 0..HOURS {
            let naive = |f: fn(&DayPrices) -> &[u64; HOURS]| {
                500 * f(&history[&(t - 1)])[h] + 300 * f(&history[&(t - 2)])[h] + 200 * f(&history[&(t - 7)])[h]
            };
            ensure!(pred.a_micro[h] == naive(|p| &p.a), "rtp_predict_day a case {i}");
            ensure!(pred.b_micro[h] == naive(|p| &p.b), "rtp_predict_day b case {i}");
        }

        let k = rng.gen_range(1..6);
        let model = StsModel { phi_milli: (0..k).map(|_| rng.gen_range(-2_000..2_000)).collect(), noise_sigma: 0.0 };
        let hist: Vec<u64> = (0..rng.gen_range(k..12)).map(|_| rng.gen_range(0..1 << 32)).collect();
        let naive: i128 = (1..=k).map(|j| model.phi_milli[j - 1] as i128 * hist[hist.len() - j] as i128).sum();
        ensure!(forecast_sts(&hist, &model).map(|v| v as i128) == Ok(naive), "forecast_sts case {i}");

        let len = rng.gen_range(0..HOURS);
        let readings: Vec<u64> = (0..len).map(|_| rng.gen_range(0..1 << 24)).collect();
        let prices: Vec<u64> = (0..len).map(|_| rng.gen_range(0..1 << 24)).collect();
        let naive: u64 = readings.iter().zip(&prices).map(|(r, p)| r * p).sum();
        ensure!(compute_bill(&readings, &prices) == Ok(naive), "compute_bill case {i}");
    }
    Ok(format!("price_rtp exhaustive over [0, 2000]; {CASES} random cases for the others"))
}

fn comparative_performance() -> Verdict {
    let start = Instant::now();
    let mut keys = PaillierContext::new(PAILLIER_BITS, 8);
    let spec = |function, backend| BenchSpec { function, users: 2000, backend, iterations: 30, seed: 8 };
    let agg_e = run_bench(&spec(Function::Agg, Backend::Enclave), None);
    let agg_p = run_bench(&spec(Function::Agg, Backend::Paillier), Some(&mut keys));
    ensure!(agg_e.checksum == agg_p.checksum, "backends disagree: {} vs {}", agg_e.checksum, agg_p.checksum);
    let price_e = run_bench(&spec(Function::Pricing, Backend::Enclave), None);
    let price_p = run_bench(&spec(Function::Pricing, Backend::Paillier), Some(&mut keys));
    let agg_ratio = agg_p.median_ms / agg_e.median_ms;
    let price_ratio = price_p.median_ms / price_e.median_ms;
    if agg_ratio.is_nan() || agg_ratio < 100.0 {
        return Err(format!("aggregation only {agg_ratio:.0}x faster"));
    }
    if price_ratio.is_nan() || price_ratio < 1000.0 {
        return Err(format!("pricing only {price_ratio:.0}x faster"));
    }
    let t = within(start.elapsed(), 600)?;
    Ok(format!(
        "aggregation n=2000 {agg_ratio:.0}x ({:.4} vs {:.2} ms), pricing {price_ratio:.0}x per request ({:.6} vs {:.3} ms), {t}",
        agg_e.median_ms, agg_p.median_ms, price_e.median_ms, price_p.median_ms
    ))
}

fn crypto_conformance() -> Verdict {
    for v in GCM_VECTORS {
        check_vector(v)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    const FORGERIES: usize = 10_000;
    for i in 0..FORGERIES {
        let key = SymKey::generate(&mut rng);
        let msg: Vec<u8> = (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect();
        let aad: Vec<u8> = (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect();
        let env = ae_encrypt_with_iv(&key, rng.gen(), &msg, &aad);
        let (forged, forged_aad) = mutate(&env, &aad, &mut rng);
        ensure!(ae_decrypt(&key, &forged, &forged_aad).is_err(), "forgery {i} accepted");
    }
    Ok(format!("{} published vectors pass; {FORGERIES} mutation forgeries rejected", GCM_VECTORS.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("honest end-to-end", honest_end_to_end),
        ("attack soundness", attack_soundness),
        ("rollback detection", rollback_detection),
        ("double registration", double_registration),
        ("gateway restart", gateway_restart),
        ("obliviousness", obliviousness),
        ("formula oracles", formula_oracles),
        ("comparative performance", comparative_performance),
        ("crypto conformance", crypto_conformance),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {reason}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
