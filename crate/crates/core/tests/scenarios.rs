use fairgate_core::drift::DriftStatus;
use fairgate_core::rollout::RolloutStatus;
use fairgate_core::simulator::{builtin, run_named, run_scenario, SimError, BUILTIN_SCENARIOS};

fn report_of(name: &str) -> fairgate_core::simulator::ScenarioReport {
    let r = run_named(name, None).unwrap();
    for c in &r.expectations {
        eprintln!("{name}: {} expected={} observed={} held={}", c.name, c.expected, c.observed, c.held);
    }
    r
}

#[test]
fn builtin_expectations_hold() {
    for name in BUILTIN_SCENARIOS {
        let r = report_of(name);
        assert!(r.all_held, "{name} expectations failed");
        assert!(!r.expectations.is_empty());
    }
}

#[test]
fn vaccine_share_psi_matches_closed_form() {
    let r = report_of("vaccine");
    let d = r.drift.unwrap();
    let psi = d.share_psi["comorbidity"];
    // final window is entirely post-onset; sampling noise around 0.0512
    assert!((psi - 0.0512).abs() < 0.02, "psi {psi}");
    assert_eq!(d.report.share_entry("comorbidity").unwrap().status, DriftStatus::Watch);
}

#[test]
fn tay_rolls_back_before_half_exposure() {
    let r = report_of("tay");
    let c = r.canary.unwrap();
    assert_eq!(c.status, RolloutStatus::RolledBack);
    assert!(c.max_fraction < 0.5);
}

#[test]
fn scripts_round_trip_through_json() {
    for name in BUILTIN_SCENARIOS {
        let s = builtin(name).unwrap();
        let json = serde_json::to_string_pretty(&s).unwrap();
        let back: fairgate_core::simulator::ScenarioScript = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}

#[test]
fn scenario_fixtures_match_builtins() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let bless = std::env::var_os("FAIRGATE_BLESS").is_some();
    for name in BUILTIN_SCENARIOS {
        if bless {
            let json = serde_json::to_string_pretty(&builtin(name).unwrap()).unwrap();
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(dir.join(format!("{name}.json")), json + "\n").unwrap();
        }
        let text = std::fs::read_to_string(dir.join(format!("{name}.json")))
            .unwrap_or_else(|e| panic!("scenarios/{name}.json: {e}"));
        let script: fairgate_core::simulator::ScenarioScript = serde_json::from_str(&text).unwrap();
        assert_eq!(script, builtin(name).unwrap(), "scenarios/{name}.json is stale");
    }
}

#[test]
fn unknown_scenario_is_an_error() {
    assert!(matches!(run_named("bogus", None), Err(SimError::UnknownScenario(_))));
}

#[test]
fn reports_are_deterministic() {
    let s = builtin("gender_shades").unwrap();
    let a = serde_json::to_string(&run_scenario(&s).unwrap()).unwrap();
    let b = serde_json::to_string(&run_scenario(&s).unwrap()).unwrap();
    assert_eq!(a, b);
}
