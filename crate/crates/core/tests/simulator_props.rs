use std::collections::BTreeMap;

use fairgate_core::drift::{drift_report, DriftStatus, DriftThresholds};
use fairgate_core::metrics::DEFAULT_MIN_COUNT;
use fairgate_core::model::{latest_window, WindowSpec};
use fairgate_core::simulator::{
    builtin, generate_population, inject_drift, DriftInjection, DriftKind, LabelBands, ModelBehavior, ParamPatch,
    PopulationSpec,
};
use proptest::prelude::*;

fn small_spec(seed: u64, volume: usize) -> PopulationSpec {
    let mut s = builtin("null").unwrap().baseline;
    s.seed = seed;
    s.volume = volume;
    s
}

#[test]
fn priors_recovered_at_scale() {
    let mut s = builtin("vaccine").unwrap().baseline;
    s.volume = 100_000;
    let stream = generate_population(&s).unwrap();
    let b = stream.predictions.iter().filter(|e| e.subgroup["comorbidity"] == "b").count();
    let share = b as f64 / s.volume as f64;
    assert!((share - 0.05).abs() <= 0.005, "minority share {share}");
}

#[test]
fn null_runs_rarely_raise_data_alerts() {
    let script = builtin("null").unwrap();
    let mut alerts = 0;
    for seed in 0..100u64 {
        let mut spec = script.baseline.clone();
        spec.seed = seed;
        spec.volume = 10_000;
        let label = spec.nutrition_label(&LabelBands::default(), "null");
        let store = generate_population(&spec).unwrap().into_store(10_000);
        let window = latest_window(store.records(), WindowSpec::Count { size: 10_000 });
        let report = drift_report(&label, &window, &DriftThresholds::default(), DEFAULT_MIN_COUNT);
        if report.data.iter().any(|e| e.status == DriftStatus::Alert) {
            alerts += 1;
        }
    }
    assert!(alerts <= 5, "{alerts} of 100 null runs raised a data-drift alert");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn seed_fixes_every_byte(seed in any::<u64>(), volume in 1usize..400) {
        let a = generate_population(&small_spec(seed, volume)).unwrap();
        let b = generate_population(&small_spec(seed, volume)).unwrap();
        prop_assert_eq!(a.interleaved_jsonl(), b.interleaved_jsonl());
        prop_assert_eq!(a.predictions.len(), volume);
    }

    #[test]
    fn prefix_before_onset_is_untouched(seed in any::<u64>(), volume in 2usize..400, onset_frac in 0.0f64..1.0, prior in 0.05f64..0.95) {
        let stream = generate_population(&small_spec(seed, volume)).unwrap();
        let onset = ((volume - 1) as f64 * onset_frac) as usize;
        let injections = [
            DriftInjection {
                kind: DriftKind::PriorShift,
                onset,
                new: ParamPatch {
                    priors: Some(BTreeMap::from([("a".to_string(), prior), ("b".to_string(), 1.0 - prior)])),
                    ..ParamPatch::default()
                },
            },
            DriftInjection {
                kind: DriftKind::ConceptShift,
                onset,
                new: ParamPatch {
                    behavior: Some(BTreeMap::from([("b".to_string(), ModelBehavior { tpr: 0.2, fpr: 0.7 })])),
                    ..ParamPatch::default()
                },
            },
        ];
        for inj in injections {
            let drifted = inject_drift(&stream, inj).unwrap();
            prop_assert_eq!(&drifted.predictions[..onset], &stream.predictions[..onset]);
            prop_assert_eq!(&drifted.outcomes[..onset], &stream.outcomes[..onset]);
            prop_assert_eq!(drifted.predictions.len(), volume);
        }
    }
}

#[test]
fn injections_are_validated() {
    let stream = generate_population(&small_spec(1, 100)).unwrap();
    let bad_priors = DriftInjection {
        kind: DriftKind::PriorShift,
        onset: 10,
        new: ParamPatch {
            priors: Some(BTreeMap::from([("a".to_string(), 0.5)])),
            ..ParamPatch::default()
        },
    };
    assert!(inject_drift(&stream, bad_priors).is_err());
    let empty_concept = DriftInjection {
        kind: DriftKind::ConceptShift,
        onset: 10,
        new: ParamPatch::default(),
    };
    assert!(inject_drift(&stream, empty_concept).is_err());
}
