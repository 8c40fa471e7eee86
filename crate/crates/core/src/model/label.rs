//! Training-time baseline manifest ("nutrition label").

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::drift::DistributionSnapshot;
use crate::metrics::{GroupRates, RateMetric};

/// Tolerance on the per-attribute training-share sum.
pub const SHARE_TOLERANCE: f64 = 1e-9;

/// Closed interval `[low, high]`, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band(pub f64, pub f64);

impl Band {
    pub fn low(&self) -> f64 {
        self.0
    }

    pub fn high(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, value: f64) -> bool {
        self.0 <= value && value <= self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupEntry {
    pub attribute: String,
    pub category: String,
    pub training_share: f64,
    #[serde(default)]
    pub baseline_rates: GroupRates,
    #[serde(default)]
    pub acceptable_band: BTreeMap<RateMetric, Band>,
    #[serde(default)]
    pub feature_baselines: BTreeMap<String, DistributionSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutritionLabel {
    pub label_version: String,
    pub model_version: String,
    pub subgroup_schema: Vec<String>,
    pub subgroups: Vec<SubgroupEntry>,
    /// Population-wide feature baselines.
    #[serde(default)]
    pub feature_baselines: BTreeMap<String, DistributionSnapshot>,
}

impl NutritionLabel {
    /// Parses and validates a label document. Nothing is returned unless every
    /// invariant holds.
    pub fn from_json(document: &str) -> Result<Self, ModelError> {
        let label: NutritionLabel =
            serde_json::from_str(document).map_err(|e| ModelError::Parse(e.to_string()))?;
        label.validate()?;
        Ok(label)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::Validation(msg));
        if self.subgroup_schema.is_empty() {
            return invalid("subgroup_schema must name at least one attribute".into());
        }
        let schema: BTreeSet<&str> = self.subgroup_schema.iter().map(String::as_str).collect();
        if schema.len() != self.subgroup_schema.len() {
            return invalid("subgroup_schema lists an attribute twice".into());
        }
        let mut seen = BTreeSet::new();
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        for entry in &self.subgroups {
            let who = format!("{}={}", entry.attribute, entry.category);
            if !schema.contains(entry.attribute.as_str()) {
                return invalid(format!("subgroup {who} uses an attribute outside subgroup_schema"));
            }
            if !seen.insert((entry.attribute.as_str(), entry.category.as_str())) {
                return invalid(format!("subgroup {who} listed twice"));
            }
            if !(0.0..=1.0).contains(&entry.training_share) {
                return invalid(format!("training_share of {who} outside [0, 1]"));
            }
            *sums.entry(entry.attribute.as_str()).or_default() += entry.training_share;
            if let Err(msg) = entry.baseline_rates.check_ranges() {
                return invalid(format!("baseline_rates of {who}: {msg}"));
            }
            for (metric, band) in &entry.acceptable_band {
                if !band.low().is_finite() || !band.high().is_finite() {
                    return invalid(format!("acceptable_band {metric} of {who} is not finite"));
                }
                if band.low() > band.high() {
                    return invalid(format!(
                        "acceptable_band {metric} of {who} has low > high ({} > {})",
                        band.low(),
                        band.high()
                    ));
                }
            }
            for (feature, snapshot) in &entry.feature_baselines {
                snapshot
                    .validate()
                    .map_err(|e| ModelError::Validation(format!("feature_baselines {feature} of {who}: {e}")))?;
            }
        }
        for attribute in &self.subgroup_schema {
            let sum = sums.get(attribute.as_str()).copied().unwrap_or(0.0);
            if (sum - 1.0).abs() > SHARE_TOLERANCE {
                return invalid(format!(
                    "training shares for attribute `{attribute}` sum to {sum}, expected 1"
                ));
            }
        }
        for (feature, snapshot) in &self.feature_baselines {
            snapshot
                .validate()
                .map_err(|e| ModelError::Validation(format!("feature_baselines {feature}: {e}")))?;
        }
        Ok(())
    }

    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.subgroup_schema.iter().any(|a| a == attribute)
    }

    pub fn entries_for<'a>(&'a self, attribute: &'a str) -> impl Iterator<Item = &'a SubgroupEntry> + 'a {
        self.subgroups.iter().filter(move |e| e.attribute == attribute)
    }

    pub fn entry(&self, attribute: &str, category: &str) -> Option<&SubgroupEntry> {
        self.subgroups
            .iter()
            .find(|e| e.attribute == attribute && e.category == category)
    }

    /// The subgroup with the largest training share; ties go to the
    /// lexicographically smallest category.
    pub fn reference_subgroup<'a>(&'a self, attribute: &'a str) -> Option<&'a SubgroupEntry> {
        self.entries_for(attribute).fold(None, |best: Option<&SubgroupEntry>, e| match best {
            Some(b) if b.training_share > e.training_share => Some(b),
            Some(b) if b.training_share == e.training_share && b.category <= e.category => Some(b),
            _ => Some(e),
        })
    }

    /// Training shares of one attribute as category -> share.
    pub fn training_shares(&self, attribute: &str) -> BTreeMap<String, f64> {
        self.entries_for(attribute)
            .map(|e| (e.category.clone(), e.training_share))
            .collect()
    }
}
