#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use fairgate_core::metrics::{group_rates, ConfusionMatrix, RateMetric};
use fairgate_core::model::{Band, Environment, JoinedRecord, Label, NutritionLabel, PredictionEvent, SubgroupEntry};

pub const ATTR: &str = "group";

pub fn event(id: usize, category: &str, predicted: bool) -> PredictionEvent {
    PredictionEvent {
        event_id: format!("e{id:06}"),
        timestamp: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::seconds(id as i64),
        model_version: "m1".into(),
        environment: Environment::Stable,
        subgroup: BTreeMap::from([(ATTR.to_string(), category.to_string())]),
        features: None,
        score: if predicted { 0.9 } else { 0.1 },
        predicted_label: Label::from(predicted),
        rollout_id: None,
    }
}

pub fn record(id: usize, category: &str, predicted: bool, actual: Option<bool>) -> JoinedRecord {
    let mut r = JoinedRecord::pending(event(id, category, predicted));
    if let Some(y) = actual {
        r.outcome_label = Some(Label::from(y));
        r.observed_at = Some(r.event.timestamp + Duration::seconds(60));
    }
    r
}

/// `(tp, fp, fn, tn)` expanded into records for one category.
pub fn records_from_counts(start: usize, category: &str, counts: (usize, usize, usize, usize)) -> Vec<JoinedRecord> {
    let (tp, fp, fn_, tn) = counts;
    let cells = [(tp, true, true), (fp, true, false), (fn_, false, true), (tn, false, false)];
    let mut out = Vec::new();
    for (n, y_hat, y) in cells {
        for _ in 0..n {
            out.push(record(start + out.len(), category, y_hat, Some(y)));
        }
    }
    out
}

/// `(category, share, baseline (tp, fp, fn, tn))`.
pub type Row<'a> = (&'a str, f64, (u64, u64, u64, u64));

/// Label over `ATTR` with bands of ±`half_width` around each baseline rate in
/// `metrics`.
pub fn label(rows: &[Row<'_>], metrics: &[RateMetric], half_width: f64) -> NutritionLabel {
    let subgroups = rows
        .iter()
        .map(|(c, share, (tp, fp, fn_, tn))| {
            let rates = group_rates(&ConfusionMatrix::new(*tp, *fp, *fn_, *tn));
            let acceptable_band = metrics
                .iter()
                .filter_map(|m| rates.get(*m).map(|b| (*m, Band((b - half_width).max(0.0), (b + half_width).min(1.0)))))
                .collect();
            SubgroupEntry {
                attribute: ATTR.into(),
                category: c.to_string(),
                training_share: *share,
                baseline_rates: rates,
                acceptable_band,
                feature_baselines: BTreeMap::new(),
            }
        })
        .collect();
    NutritionLabel {
        label_version: "l1".into(),
        model_version: "m1".into(),
        subgroup_schema: vec![ATTR.into()],
        subgroups,
        feature_baselines: BTreeMap::new(),
    }
}

pub fn two_group_label() -> NutritionLabel {
    label(
        &[("a", 0.6, (40, 10, 10, 40)), ("b", 0.4, (40, 10, 10, 40))],
        &[RateMetric::F1, RateMetric::Tpr],
        0.2,
    )
}
