use rayon::prelude::*;
use secgrid_core::sim::sweep::{enumerate_cases, run_case, ActionClass, Verdict};
use secgrid_core::sim::{run_scenario, AdversaryScript, ScenarioConfig};

fn sweep_config() -> ScenarioConfig {
    ScenarioConfig { meters: 3, periods: 5, seed: 11, ..Default::default() }
}

#[test]
fn every_single_action_attack_is_harmless_or_alarmed() {
    let cfg = sweep_config();
    let honest = run_scenario(&cfg, &AdversaryScript::new(), cfg.seed).unwrap();
    assert!(honest.alarms.is_empty());
    let cases = enumerate_cases(&cfg, &honest, 20);
    for class in [ActionClass::Drop, ActionClass::Replay, ActionClass::Tamper, ActionClass::RollbackStore] {
        assert!(cases.iter().any(|c| c.class == class), "no {class:?} cases");
    }
    let results: Vec<_> = cases.par_iter().map(|c| run_case(&cfg, &honest, c)).collect();
    let unsound: Vec<_> = results.iter().filter(|r| !r.verdict.is_sound()).collect();
    for r in &unsound {
        eprintln!("{}: {:?} alarms {:?}", r.case.name, r.verdict, r.alarms);
    }
    let detected = results.iter().filter(|r| r.verdict == Verdict::Detected).count();
    eprintln!("{} cases, {} detected, {} unchanged", results.len(), detected, results.len() - detected - unsound.len());
    for r in results.iter().filter(|r| !r.mistyped().is_empty()) {
        eprintln!("mistyped: {} -> {:?}", r.case.name, r.alarms);
    }
    assert!(unsound.is_empty(), "{} unsound cases", unsound.len());
}
