//! Data drift (input distributions vs. the label's baselines) and concept
//! drift (labelled performance vs. the label's acceptable bands).
//!
//! Categorical inputs and subgroup shares are scored with the population
//! stability index, continuous inputs with the two-sample Kolmogorov-Smirnov
//! statistic. Concept drift compares each subgroup's observed rates with its
//! baseline and flags values outside the acceptable band.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Coded;
use crate::metrics::{stratified_metrics, RateMetric, MISSING_CATEGORY};
use crate::model::{Band, FeatureValue, JoinedRecord, NutritionLabel, Window, WindowDescriptor};

/// Share substituted for a category that one side never observed.
pub const SMOOTHING_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DriftError {
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Coded for DriftError {
    fn code(&self) -> &'static str {
        match self {
            DriftError::DegenerateDistribution(_) => "DegenerateDistribution",
            DriftError::InsufficientData(_) => "InsufficientData",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSnapshot {
    Categorical {
        shares: BTreeMap<String, f64>,
        support: u64,
    },
    /// A sorted sample of observed values.
    Continuous { sample: Vec<f64>, support: u64 },
}

impl DistributionSnapshot {
    pub fn from_counts(counts: &BTreeMap<String, u64>) -> Self {
        let support: u64 = counts.values().sum();
        let shares = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(k, &c)| (k.clone(), c as f64 / support as f64))
            .collect();
        DistributionSnapshot::Categorical { shares, support }
    }

    pub fn from_shares(shares: BTreeMap<String, f64>, support: u64) -> Self {
        DistributionSnapshot::Categorical { shares, support }
    }

    pub fn from_sample(mut sample: Vec<f64>) -> Self {
        sample.sort_by(f64::total_cmp);
        let support = sample.len() as u64;
        DistributionSnapshot::Continuous { sample, support }
    }

    pub fn support(&self) -> u64 {
        match self {
            DistributionSnapshot::Categorical { support, .. }
            | DistributionSnapshot::Continuous { support, .. } => *support,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            DistributionSnapshot::Categorical { shares, support } => {
                if shares.values().any(|s| !(0.0..=1.0).contains(s)) {
                    return Err("categorical share outside [0, 1]".into());
                }
                if *support > 0 || !shares.is_empty() {
                    let sum: f64 = shares.values().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(format!("categorical shares sum to {sum}, expected 1"));
                    }
                }
                Ok(())
            }
            DistributionSnapshot::Continuous { sample, support } => {
                if *support > 0 && sample.is_empty() {
                    return Err("continuous sample empty while support > 0".into());
                }
                if sample.iter().any(|x| !x.is_finite()) {
                    return Err("continuous sample holds a non-finite value".into());
                }
                if sample.windows(2).any(|w| w[0] > w[1]) {
                    return Err("continuous sample must be sorted".into());
                }
                Ok(())
            }
        }
    }
}

fn smoothed(shares: &BTreeMap<String, f64>, categories: &BTreeSet<&String>) -> Vec<f64> {
    let raw: Vec<f64> = categories
        .iter()
        .map(|c| match shares.get(*c) {
            Some(&s) if s > 0.0 => s,
            _ => SMOOTHING_EPSILON,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|s| s / total).collect()
}

/// Population stability index `Σ (actual − expected) · ln(actual / expected)`.
///
/// Categories seen on only one side get [`SMOOTHING_EPSILON`] on the other,
/// after which each side is renormalised.
pub fn psi(expected: &DistributionSnapshot, actual: &DistributionSnapshot) -> Result<f64, DriftError> {
    let (DistributionSnapshot::Categorical { shares: e, support: es }, DistributionSnapshot::Categorical { shares: a, support: as_ }) =
        (expected, actual)
    else {
        return Err(DriftError::DegenerateDistribution(
            "PSI needs two categorical distributions".into(),
        ));
    };
    if *es == 0 || *as_ == 0 || e.is_empty() || a.is_empty() {
        return Err(DriftError::DegenerateDistribution("empty distribution".into()));
    }
    let categories: BTreeSet<&String> = e.keys().chain(a.keys()).collect();
    let e = smoothed(e, &categories);
    let a = smoothed(a, &categories);
    Ok(e
        .iter()
        .zip(&a)
        .map(|(&e, &a)| (a - e) * (a / e).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest absolute gap between
/// the two empirical CDFs.
pub fn ks_statistic(baseline: &[f64], live: &[f64]) -> Result<f64, DriftError> {
    if baseline.is_empty() || live.is_empty() {
        return Err(DriftError::DegenerateDistribution("KS needs two non-empty samples".into()));
    }
    if baseline.iter().chain(live).any(|x| !x.is_finite()) {
        return Err(DriftError::DegenerateDistribution("non-finite sample value".into()));
    }
    let mut a = baseline.to_vec();
    let mut b = live.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    // once one sample is exhausted the remaining gap is attained at its end
    d = d.max((i as f64 / n - j as f64 / m).abs());
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftStatus {
    None,
    Watch,
    Alert,
    Indeterminate,
}

impl DriftStatus {
    /// `true` for watch and alert.
    pub fn fires(self) -> bool {
        matches!(self, DriftStatus::Watch | DriftStatus::Alert)
    }

    pub fn classify(value: f64, watch: f64, alert: f64) -> DriftStatus {
        if value >= alert {
            DriftStatus::Alert
        } else if value >= watch {
            DriftStatus::Watch
        } else {
            DriftStatus::None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftThresholds {
    pub psi_watch: f64,
    pub psi_alert: f64,
    pub ks_watch: f64,
    pub ks_alert: f64,
    /// Minimum sample size on each side before a KS status is issued.
    pub ks_min_support: u64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        DriftThresholds {
            psi_watch: 0.025,
            psi_alert: 0.25,
            ks_watch: 0.1,
            ks_alert: 0.2,
            ks_min_support: 100,
        }
    }
}

impl DriftThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let ordered = |w: f64, a: f64, name: &str| {
            if !(w.is_finite() && a.is_finite() && 0.0 <= w && w <= a) {
                Err(format!("{name} thresholds need 0 <= watch <= alert"))
            } else {
                Ok(())
            }
        };
        ordered(self.psi_watch, self.psi_alert, "psi")?;
        ordered(self.ks_watch, self.ks_alert, "ks")?;
        if self.ks_alert > 1.0 {
            return Err("ks_alert above 1 can never fire".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftScope {
    SubgroupShare,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Psi,
    Ks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDriftEntry {
    pub scope: DriftScope,
    /// Attribute name for share entries, feature name otherwise.
    pub name: String,
    /// `attribute=category` when the baseline is subgroup-specific.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic: Option<Statistic>,
    pub value: Option<f64>,
    pub status: DriftStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDriftEntry {
    pub attribute: String,
    pub subgroup: String,
    pub metric: RateMetric,
    pub baseline: Option<f64>,
    pub observed: Option<f64>,
    pub delta: Option<f64>,
    pub band: Band,
    pub support: u64,
    pub status: DriftStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageHint {
    InternalDataLeakageSuspected,
    ExternalVariableCaptureSuspected,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub model_version: String,
    pub window: WindowDescriptor,
    pub data: Vec<DataDriftEntry>,
    pub concept: Vec<ConceptDriftEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_note: Option<String>,
    pub triage_hint: TriageHint,
}

impl DriftReport {
    pub fn share_entry(&self, attribute: &str) -> Option<&DataDriftEntry> {
        self.data
            .iter()
            .find(|e| e.scope == DriftScope::SubgroupShare && e.name == attribute)
    }

    pub fn data_fires(&self) -> bool {
        self.data.iter().any(|e| e.status.fires())
    }

    pub fn concept_alert(&self) -> bool {
        self.concept.iter().any(|e| e.status == DriftStatus::Alert)
    }
}

fn feature_text(value: &FeatureValue) -> String {
    match value {
        FeatureValue::Number(x) => x.to_string(),
        FeatureValue::Category(c) => c.clone(),
    }
}

fn compare_feature<'a>(
    baseline: &DistributionSnapshot,
    live: impl Iterator<Item = &'a FeatureValue>,
    thresholds: &DriftThresholds,
) -> (Option<Statistic>, Option<f64>, DriftStatus, Option<String>) {
    match baseline {
        DistributionSnapshot::Categorical { .. } => {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for v in live {
                *counts.entry(feature_text(v)).or_default() += 1;
            }
            match psi(baseline, &DistributionSnapshot::from_counts(&counts)) {
                Ok(v) => (
                    Some(Statistic::Psi),
                    Some(v),
                    DriftStatus::classify(v, thresholds.psi_watch, thresholds.psi_alert),
                    None,
                ),
                Err(e) => (Some(Statistic::Psi), None, DriftStatus::Indeterminate, Some(e.to_string())),
            }
        }
        DistributionSnapshot::Continuous { sample, .. } => {
            let values: Vec<f64> = live
                .filter_map(|v| match v {
                    FeatureValue::Number(x) => Some(*x),
                    FeatureValue::Category(_) => None,
                })
                .collect();
            match ks_statistic(sample, &values) {
                Ok(d) => {
                    let min = thresholds.ks_min_support as usize;
                    if sample.len() < min || values.len() < min {
                        (
                            Some(Statistic::Ks),
                            Some(d),
                            DriftStatus::Indeterminate,
                            Some(format!("fewer than {min} values on one side")),
                        )
                    } else {
                        (
                            Some(Statistic::Ks),
                            Some(d),
                            DriftStatus::classify(d, thresholds.ks_watch, thresholds.ks_alert),
                            None,
                        )
                    }
                }
                Err(e) => (Some(Statistic::Ks), None, DriftStatus::Indeterminate, Some(e.to_string())),
            }
        }
    }
}

fn feature_values<'a>(
    records: impl Iterator<Item = &'a JoinedRecord> + 'a,
    feature: &'a str,
) -> impl Iterator<Item = &'a FeatureValue> + 'a {
    records.filter_map(move |r| r.event.features.as_ref().and_then(|f| f.get(feature)))
}

/// Scores subgroup shares and logged features of a window against the label.
///
/// Share drift is always evaluated. A live feature with no baseline anywhere
/// in the label yields an indeterminate entry.
pub fn detect_data_drift(
    label: &NutritionLabel,
    window: &Window,
    thresholds: &DriftThresholds,
) -> Vec<DataDriftEntry> {
    let records = &window.records;
    let mut entries = Vec::new();

    for attribute in &label.subgroup_schema {
        let expected = DistributionSnapshot::from_shares(label.training_shares(attribute), 1);
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for r in records {
            let c = r.event.category(attribute).unwrap_or(MISSING_CATEGORY);
            *counts.entry(c.to_string()).or_default() += 1;
        }
        let actual = DistributionSnapshot::from_counts(&counts);
        let entry = match psi(&expected, &actual) {
            Ok(v) => DataDriftEntry {
                scope: DriftScope::SubgroupShare,
                name: attribute.clone(),
                subgroup: None,
                statistic: Some(Statistic::Psi),
                value: Some(v),
                status: DriftStatus::classify(v, thresholds.psi_watch, thresholds.psi_alert),
                note: None,
            },
            Err(e) => DataDriftEntry {
                scope: DriftScope::SubgroupShare,
                name: attribute.clone(),
                subgroup: None,
                statistic: Some(Statistic::Psi),
                value: None,
                status: DriftStatus::Indeterminate,
                note: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }

    for (feature, baseline) in &label.feature_baselines {
        let (statistic, value, status, note) =
            compare_feature(baseline, feature_values(records.iter(), feature), thresholds);
        entries.push(DataDriftEntry {
            scope: DriftScope::Feature,
            name: feature.clone(),
            subgroup: None,
            statistic,
            value,
            status,
            note,
        });
    }

    for entry in &label.subgroups {
        for (feature, baseline) in &entry.feature_baselines {
            let stratum = records
                .iter()
                .filter(|r| r.event.category(&entry.attribute) == Some(entry.category.as_str()));
            let (statistic, value, status, note) =
                compare_feature(baseline, feature_values(stratum, feature), thresholds);
            entries.push(DataDriftEntry {
                scope: DriftScope::Feature,
                name: feature.clone(),
                subgroup: Some(format!("{}={}", entry.attribute, entry.category)),
                statistic,
                value,
                status,
                note,
            });
        }
    }

    let known: BTreeSet<&str> = label
        .feature_baselines
        .keys()
        .chain(label.subgroups.iter().flat_map(|e| e.feature_baselines.keys()))
        .map(String::as_str)
        .collect();
    let live: BTreeSet<&str> = records
        .iter()
        .filter_map(|r| r.event.features.as_ref())
        .flat_map(|f| f.keys().map(String::as_str))
        .collect();
    for feature in live.difference(&known) {
        entries.push(DataDriftEntry {
            scope: DriftScope::Feature,
            name: feature.to_string(),
            subgroup: None,
            statistic: None,
            value: None,
            status: DriftStatus::Indeterminate,
            note: Some("no baseline in the nutrition label".into()),
        });
    }
    entries
}

/// Compares observed subgroup rates with the label's bands.
///
/// Subgroups below `min_count` outcome-bearing records are reported as
/// indeterminate; if no subgroup qualifies the whole check is
/// [`DriftError::InsufficientData`].
pub fn detect_concept_drift(
    label: &NutritionLabel,
    window: &Window,
    min_count: usize,
) -> Result<Vec<ConceptDriftEntry>, DriftError> {
    let mut entries = Vec::new();
    let mut evaluated_any = false;
    for attribute in &label.subgroup_schema {
        let strata = stratified_metrics(&window.records, attribute, &label.subgroup_schema)
            .expect("attribute comes from the schema");
        for entry in label.entries_for(attribute) {
            let stratum = strata.iter().find(|s| s.category == entry.category);
            let support = stratum.map_or(0, |s| s.outcome_bearing as u64);
            let sufficient = support >= min_count.max(1) as u64;
            evaluated_any |= sufficient;
            for (&metric, &band) in &entry.acceptable_band {
                let baseline = entry.baseline_rates.get(metric);
                let observed = stratum.and_then(|s| s.rates.get(metric)).filter(|_| sufficient);
                let status = match observed {
                    Some(v) if !band.contains(v) => DriftStatus::Alert,
                    Some(_) => DriftStatus::None,
                    None => DriftStatus::Indeterminate,
                };
                entries.push(ConceptDriftEntry {
                    attribute: attribute.clone(),
                    subgroup: entry.category.clone(),
                    metric,
                    baseline,
                    observed,
                    delta: observed.zip(baseline).map(|(o, b)| o - b),
                    band,
                    support,
                    status,
                });
            }
        }
    }
    if !evaluated_any {
        return Err(DriftError::InsufficientData(format!(
            "no subgroup has {min_count} outcome-bearing records"
        )));
    }
    Ok(entries)
}

/// Heuristic source hint. External capture needs both a concept alert and a
/// firing data-drift entry; a concept alert alone points at the pipeline.
pub fn triage(data: &[DataDriftEntry], concept: &[ConceptDriftEntry]) -> TriageHint {
    let concept_alert = concept.iter().any(|e| e.status == DriftStatus::Alert);
    let data_fires = data.iter().any(|e| e.status.fires());
    match (concept_alert, data_fires) {
        (true, true) => TriageHint::ExternalVariableCaptureSuspected,
        (true, false) => TriageHint::InternalDataLeakageSuspected,
        _ => TriageHint::Indeterminate,
    }
}

/// Full drift report for one window.
pub fn drift_report(
    label: &NutritionLabel,
    window: &Window,
    thresholds: &DriftThresholds,
    min_count: usize,
) -> DriftReport {
    let data = detect_data_drift(label, window, thresholds);
    let (concept, concept_note) = match detect_concept_drift(label, window, min_count) {
        Ok(c) => (c, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let triage_hint = triage(&data, &concept);
    DriftReport {
        model_version: label.model_version.clone(),
        window: window.descriptor.clone(),
        data,
        concept,
        concept_note,
        triage_hint,
    }
}
