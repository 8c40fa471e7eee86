//! Stratified confusion matrices, per-subgroup rates and parity gaps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Coded;
use crate::model::{JoinedRecord, Label, NutritionLabel, Window, WindowDescriptor};

/// Stratum used for records that do not carry the requested attribute.
pub const MISSING_CATEGORY: &str = "__missing__";

pub const DEFAULT_MIN_COUNT: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("attribute `{0}` is not in the subgroup schema")]
    UnknownAttribute(String),
    #[error("record `{0}` has no outcome")]
    MissingOutcome(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Coded for MetricsError {
    fn code(&self) -> &'static str {
        match self {
            MetricsError::UnknownAttribute(_) => "UnknownAttribute",
            MetricsError::MissingOutcome(_) => "MissingOutcome",
            MetricsError::InsufficientData(_) => "InsufficientData",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Outcome-bearing records a subgroup needs before its gaps are reported.
    pub min_count: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            min_count: DEFAULT_MIN_COUNT,
        }
    }
}

/// Per-subgroup rates that bands and gates can refer to by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMetric {
    Tpr,
    Fpr,
    Ppv,
    F1,
    PositiveRate,
    ErrorRate,
}

impl RateMetric {
    pub const ALL: [RateMetric; 6] = [
        RateMetric::Tpr,
        RateMetric::Fpr,
        RateMetric::Ppv,
        RateMetric::F1,
        RateMetric::PositiveRate,
        RateMetric::ErrorRate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RateMetric::Tpr => "tpr",
            RateMetric::Fpr => "fpr",
            RateMetric::Ppv => "ppv",
            RateMetric::F1 => "f1",
            RateMetric::PositiveRate => "positive_rate",
            RateMetric::ErrorRate => "error_rate",
        }
    }
}

impl fmt::Display for RateMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RateMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RateMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// The three parity criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParityMetric {
    DemographicParity,
    EqualOpportunity,
    EqualizedOdds,
}

impl ParityMetric {
    pub const ALL: [ParityMetric; 3] = [
        ParityMetric::DemographicParity,
        ParityMetric::EqualOpportunity,
        ParityMetric::EqualizedOdds,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParityMetric::DemographicParity => "demographic_parity",
            ParityMetric::EqualOpportunity => "equal_opportunity",
            ParityMetric::EqualizedOdds => "equalized_odds",
        }
    }

    pub fn gap(self, reference: &GroupRates, other: &GroupRates, min_count: usize) -> Result<f64, MetricsError> {
        match self {
            ParityMetric::DemographicParity => demographic_parity_gap(reference, other, min_count),
            ParityMetric::EqualOpportunity => equal_opportunity_gap(reference, other, min_count),
            ParityMetric::EqualizedOdds => equalized_odds_gap(reference, other, min_count),
        }
    }
}

impl fmt::Display for ParityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParityMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown parity metric `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: Label, actual: Label) {
        match (predicted, actual) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fp += 1,
            (Label::Negative, Label::Positive) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }
}

/// Rates derived from a confusion matrix. `None` marks a rate whose
/// denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupRates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub ppv: Option<f64>,
    pub f1: Option<f64>,
    pub positive_rate: Option<f64>,
    pub error_rate: Option<f64>,
    pub support: u64,
}

impl GroupRates {
    pub fn get(&self, metric: RateMetric) -> Option<f64> {
        match metric {
            RateMetric::Tpr => self.tpr,
            RateMetric::Fpr => self.fpr,
            RateMetric::Ppv => self.ppv,
            RateMetric::F1 => self.f1,
            RateMetric::PositiveRate => self.positive_rate,
            RateMetric::ErrorRate => self.error_rate,
        }
    }

    pub(crate) fn check_ranges(&self) -> Result<(), String> {
        for metric in RateMetric::ALL {
            if let Some(v) = self.get(metric) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{metric} = {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn group_rates(cm: &ConfusionMatrix) -> GroupRates {
    let total = cm.total();
    GroupRates {
        tpr: ratio(cm.tp, cm.tp + cm.fn_),
        fpr: ratio(cm.fp, cm.fp + cm.tn),
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
        positive_rate: ratio(cm.tp + cm.fp, total),
        error_rate: ratio(cm.fp + cm.fn_, total),
        support: total,
    }
}

/// Tallies outcome-bearing records by (predicted, actual).
pub fn confusion_matrix<'a, I>(records: I) -> Result<ConfusionMatrix, MetricsError>
where
    I: IntoIterator<Item = &'a JoinedRecord>,
{
    let mut cm = ConfusionMatrix::default();
    for record in records {
        let actual = record
            .outcome_label
            .ok_or_else(|| MetricsError::MissingOutcome(record.event.event_id.clone()))?;
        cm.record(record.event.predicted_label, actual);
    }
    Ok(cm)
}

/// Partitions records by their category for `attribute`.
///
/// Records without the attribute land in [`MISSING_CATEGORY`]; categories the
/// schema has never seen simply become their own stratum.
pub fn stratify<'a>(
    records: &'a [JoinedRecord],
    attribute: &str,
    schema: &[String],
) -> Result<BTreeMap<String, Vec<&'a JoinedRecord>>, MetricsError> {
    if !schema.iter().any(|a| a == attribute) {
        return Err(MetricsError::UnknownAttribute(attribute.to_string()));
    }
    let mut strata: BTreeMap<String, Vec<&JoinedRecord>> = BTreeMap::new();
    for record in records {
        let category = record.event.category(attribute).unwrap_or(MISSING_CATEGORY);
        strata.entry(category.to_string()).or_default().push(record);
    }
    Ok(strata)
}

fn insufficient(reference: &GroupRates, other: &GroupRates, min_count: usize) -> Option<MetricsError> {
    let min_count = min_count as u64;
    if reference.support < min_count.max(1) || other.support < min_count.max(1) {
        Some(MetricsError::InsufficientData(format!(
            "support {} / {} below min_count {min_count}",
            reference.support, other.support
        )))
    } else {
        None
    }
}

fn rate_gap(
    name: &str,
    reference: Option<f64>,
    other: Option<f64>,
) -> Result<f64, MetricsError> {
    match (reference, other) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(MetricsError::InsufficientData(format!("{name} undefined for a subgroup"))),
    }
}

/// `|P(Ŷ=1 | reference) − P(Ŷ=1 | other)|`.
pub fn demographic_parity_gap(
    reference: &GroupRates,
    other: &GroupRates,
    min_count: usize,
) -> Result<f64, MetricsError> {
    if let Some(e) = insufficient(reference, other, min_count) {
        return Err(e);
    }
    rate_gap("positive_rate", reference.positive_rate, other.positive_rate)
}

/// Gap in true-positive rate, `P(Ŷ=1 | A, Y=1)`.
pub fn equal_opportunity_gap(
    reference: &GroupRates,
    other: &GroupRates,
    min_count: usize,
) -> Result<f64, MetricsError> {
    if let Some(e) = insufficient(reference, other, min_count) {
        return Err(e);
    }
    rate_gap("tpr", reference.tpr, other.tpr)
}

/// Larger of the TPR gap and the FPR gap: zero only when both conditional
/// equalities hold.
pub fn equalized_odds_gap(
    reference: &GroupRates,
    other: &GroupRates,
    min_count: usize,
) -> Result<f64, MetricsError> {
    if let Some(e) = insufficient(reference, other, min_count) {
        return Err(e);
    }
    let tpr = rate_gap("tpr", reference.tpr, other.tpr)?;
    let fpr = rate_gap("fpr", reference.fpr, other.fpr)?;
    Ok(tpr.max(fpr))
}

/// A gap value, or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gap {
    Value(f64),
    InsufficientData(String),
}

impl Gap {
    pub fn value(&self) -> Option<f64> {
        match self {
            Gap::Value(v) => Some(*v),
            Gap::InsufficientData(_) => None,
        }
    }

    fn from_result(result: Result<f64, MetricsError>) -> Gap {
        match result {
            Ok(v) => Gap::Value(v),
            Err(MetricsError::InsufficientData(why)) => Gap::InsufficientData(why),
            Err(other) => Gap::InsufficientData(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityPair {
    pub other_subgroup: String,
    pub reference_support: u64,
    pub other_support: u64,
    pub demographic_parity_gap: Gap,
    pub equal_opportunity_gap: Gap,
    pub equalized_odds_gap: Gap,
}

impl ParityPair {
    pub fn gap(&self, metric: ParityMetric) -> &Gap {
        match metric {
            ParityMetric::DemographicParity => &self.demographic_parity_gap,
            ParityMetric::EqualOpportunity => &self.equal_opportunity_gap,
            ParityMetric::EqualizedOdds => &self.equalized_odds_gap,
        }
    }

    pub fn is_sufficient(&self) -> bool {
        ParityMetric::ALL.iter().all(|m| self.gap(*m).value().is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub attribute: String,
    pub reference_subgroup: String,
    pub min_count: usize,
    pub window: WindowDescriptor,
    pub pairs: Vec<ParityPair>,
}

impl ParityReport {
    /// Largest defined gap of `metric` over all pairs.
    pub fn max_gap(&self, metric: ParityMetric) -> Option<f64> {
        self.pairs
            .iter()
            .filter_map(|p| p.gap(metric).value())
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    }

    pub fn all_sufficient(&self) -> bool {
        self.pairs.iter().all(ParityPair::is_sufficient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub category: String,
    pub records: usize,
    pub outcome_bearing: usize,
    pub confusion: ConfusionMatrix,
    pub rates: GroupRates,
}

/// Per-category confusion matrices over the outcome-bearing records of each
/// stratum.
pub fn stratified_metrics(
    records: &[JoinedRecord],
    attribute: &str,
    schema: &[String],
) -> Result<Vec<StratumMetrics>, MetricsError> {
    let strata = stratify(records, attribute, schema)?;
    Ok(strata
        .into_iter()
        .map(|(category, recs)| {
            let labelled: Vec<&JoinedRecord> = recs.iter().copied().filter(|r| r.has_outcome()).collect();
            let confusion = confusion_matrix(labelled.iter().copied()).expect("filtered to outcome-bearing");
            StratumMetrics {
                category,
                records: recs.len(),
                outcome_bearing: labelled.len(),
                confusion,
                rates: group_rates(&confusion),
            }
        })
        .collect())
}

/// Gap triples between the label's reference subgroup and every other
/// subgroup observed in the window.
pub fn parity_report(
    window: &Window,
    attribute: &str,
    label: &NutritionLabel,
    config: &MetricsConfig,
) -> Result<ParityReport, MetricsError> {
    if !label.has_attribute(attribute) {
        return Err(MetricsError::UnknownAttribute(attribute.to_string()));
    }
    let reference = label
        .reference_subgroup(attribute)
        .ok_or_else(|| MetricsError::UnknownAttribute(attribute.to_string()))?
        .category
        .clone();
    let strata = stratified_metrics(&window.records, attribute, &label.subgroup_schema)?;
    let mut pairs = Vec::new();
    if strata.len() >= 2 {
        let reference_rates = strata
            .iter()
            .find(|s| s.category == reference)
            .map(|s| s.rates)
            .unwrap_or_default();
        for stratum in strata.iter().filter(|s| s.category != reference) {
            let other = &stratum.rates;
            let gap = |m: ParityMetric| Gap::from_result(m.gap(&reference_rates, other, config.min_count));
            pairs.push(ParityPair {
                other_subgroup: stratum.category.clone(),
                reference_support: reference_rates.support,
                other_support: other.support,
                demographic_parity_gap: gap(ParityMetric::DemographicParity),
                equal_opportunity_gap: gap(ParityMetric::EqualOpportunity),
                equalized_odds_gap: gap(ParityMetric::EqualizedOdds),
            });
        }
    }
    Ok(ParityReport {
        attribute: attribute.to_string(),
        reference_subgroup: reference,
        min_count: config.min_count,
        window: window.descriptor.clone(),
        pairs,
    })
}
