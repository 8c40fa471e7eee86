//! Human review of suspect windows and observations: flag, then approve,
//! prune or nudge into a retraining set.
//!
//! Pruning is a tag, not a deletion: pruned rows stay in the audit trail and
//! are only hidden from the trainable export. Nudging writes the reviewer's
//! label onto the retraining row and keeps the machine label beside it; the
//! event store is never touched.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Coded;
use crate::metrics::{stratified_metrics, RateMetric};
use crate::model::{JoinedRecord, Label, NutritionLabel, Window, WindowDescriptor};

/// Schema version written in the export header.
pub const EXPORT_SCHEMA_VERSION: u32 = 1;

/// Default cutoff: four points under the baseline.
pub const DEFAULT_CUTOFF_DELTA: f64 = 0.04;

const BOUNDARY_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HitlError {
    #[error("unknown metric: {0}")]
    UnknownMetric(String),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("no review item `{0}`")]
    UnknownItem(String),
    #[error("review item `{0}` already decided")]
    AlreadyDecided(String),
    #[error("nudge on `{0}` needs a corrected_label")]
    MissingCorrectedLabel(String),
}

impl Coded for HitlError {
    fn code(&self) -> &'static str {
        match self {
            HitlError::UnknownMetric(_) => "UnknownMetric",
            HitlError::InvalidRule(_) => "InvalidRule",
            HitlError::UnknownItem(_) => "UnknownItem",
            HitlError::AlreadyDecided(_) => "AlreadyDecided",
            HitlError::MissingCorrectedLabel(_) => "MissingCorrectedLabel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagScope {
    PerWindowSubgroup,
    PerObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    Absolute(f64),
    /// Points below the baseline.
    Delta(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRule {
    pub rule_id: String,
    /// `tpr`, `ppv` or `f1` for window scope; `score` for observation scope.
    #[serde(default = "default_metric")]
    pub metric: String,
    pub scope: FlagScope,
    pub attribute: String,
    /// Restrict to one category; all of the label's categories otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    #[serde(default = "default_cutoff")]
    pub cutoff: Cutoff,
    /// Overrides the label's baseline. Required for `score`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
}

fn default_metric() -> String {
    "f1".into()
}

fn default_cutoff() -> Cutoff {
    Cutoff::Delta(DEFAULT_CUTOFF_DELTA)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlagMetric {
    Rate(RateMetric),
    Score,
}

impl FlagRule {
    /// Window-scoped F1 rule with the default cutoff.
    pub fn f1(rule_id: impl Into<String>, attribute: impl Into<String>) -> Self {
        FlagRule {
            rule_id: rule_id.into(),
            metric: default_metric(),
            scope: FlagScope::PerWindowSubgroup,
            attribute: attribute.into(),
            subgroup: None,
            cutoff: default_cutoff(),
            baseline: None,
        }
    }

    fn parsed_metric(&self) -> Result<FlagMetric, HitlError> {
        let metric = match self.metric.as_str() {
            "score" => FlagMetric::Score,
            "tpr" => FlagMetric::Rate(RateMetric::Tpr),
            "ppv" => FlagMetric::Rate(RateMetric::Ppv),
            "f1" => FlagMetric::Rate(RateMetric::F1),
            other => {
                return Err(HitlError::UnknownMetric(format!(
                    "`{other}` is not a flaggable metric (tpr, ppv, f1, score)"
                )))
            }
        };
        match (metric, self.scope) {
            (FlagMetric::Score, FlagScope::PerWindowSubgroup) => Err(HitlError::UnknownMetric(
                "`score` applies to per_observation rules only".into(),
            )),
            (FlagMetric::Rate(m), FlagScope::PerObservation) => Err(HitlError::UnknownMetric(format!(
                "`{m}` is undefined for a single observation"
            ))),
            _ => Ok(metric),
        }
    }

    /// `(baseline, cutoff)` for one category.
    fn thresholds(&self, label: &NutritionLabel, category: &str) -> Result<(f64, f64), HitlError> {
        let metric = self.parsed_metric()?;
        let baseline = match (self.baseline, metric) {
            (Some(b), _) => b,
            (None, FlagMetric::Rate(m)) => label
                .entry(&self.attribute, category)
                .and_then(|e| e.baseline_rates.get(m))
                .ok_or_else(|| {
                    HitlError::UnknownMetric(format!(
                        "label has no {m} baseline for {}={category}",
                        self.attribute
                    ))
                })?,
            (None, FlagMetric::Score) => {
                return Err(HitlError::UnknownMetric(
                    "`score` rules need an explicit baseline".into(),
                ))
            }
        };
        let cutoff = match self.cutoff {
            Cutoff::Absolute(c) => c,
            Cutoff::Delta(d) => baseline - d,
        };
        if !(cutoff.is_finite() && baseline.is_finite()) || cutoff > baseline {
            return Err(HitlError::InvalidRule(format!(
                "rule `{}` cutoff {cutoff} above baseline {baseline}",
                self.rule_id
            )));
        }
        Ok((baseline, cutoff))
    }

    fn categories(&self, label: &NutritionLabel) -> Vec<String> {
        match &self.subgroup {
            Some(c) => vec![c.clone()],
            None => label.entries_for(&self.attribute).map(|e| e.category.clone()).collect(),
        }
    }

    pub fn validate(&self, label: &NutritionLabel) -> Result<(), HitlError> {
        if !label.has_attribute(&self.attribute) {
            return Err(HitlError::InvalidRule(format!(
                "attribute `{}` not in the label's schema",
                self.attribute
            )));
        }
        for category in self.categories(label) {
            self.thresholds(label, &category)?;
        }
        Ok(())
    }
}

/// Inclusive at the cutoff, never at or above the baseline.
pub fn should_flag(observed: f64, baseline: f64, cutoff: f64) -> bool {
    observed <= cutoff + BOUNDARY_EPSILON && observed < baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub rule_id: String,
    pub metric: String,
    pub scope: FlagScope,
    pub attribute: String,
    pub subgroup: String,
    pub baseline: f64,
    pub cutoff: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Window {
        window: WindowDescriptor,
        records: Vec<JoinedRecord>,
    },
    Observation {
        record: JoinedRecord,
    },
}

impl Payload {
    pub fn records(&self) -> Vec<&JoinedRecord> {
        match self {
            Payload::Window { records, .. } => records.iter().collect(),
            Payload::Observation { record } => vec![record],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Approved,
    Pruned,
    Nudged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Prune,
    Nudge,
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionKind::Approve => "approve",
            DecisionKind::Prune => "prune",
            DecisionKind::Nudge => "nudge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision: DecisionKind,
    pub reviewer: String,
    pub decided_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub created_at: DateTime<Utc>,
    pub trigger: Trigger,
    pub payload: Payload,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum RowTag {
    Original,
    PrunedOut,
    Nudged { corrected_label: Label },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainingRow {
    pub item_id: String,
    pub record: JoinedRecord,
    #[serde(flatten)]
    pub tag: RowTag,
}

impl RetrainingRow {
    pub fn is_trainable(&self) -> bool {
        !matches!(self.tag, RowTag::PrunedOut)
    }
}

/// Append-only collection of decided rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainingSet {
    rows: Vec<RetrainingRow>,
}

impl RetrainingSet {
    pub fn rows(&self) -> &[RetrainingRow] {
        &self.rows
    }

    pub fn trainable(&self) -> impl Iterator<Item = &RetrainingRow> {
        self.rows.iter().filter(|r| r.is_trainable())
    }

    pub fn pruned(&self) -> impl Iterator<Item = &RetrainingRow> {
        self.rows.iter().filter(|r| !r.is_trainable())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub item_id: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    pub records: usize,
}

/// Journal entry from which the whole queue can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum QueueEvent {
    Flagged { item: Box<ReviewItem> },
    Decided { item_id: String, decision: DecisionRecord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagOptions {
    /// Outcome-bearing records a subgroup needs before its window F1 counts.
    pub min_count: usize,
}

impl Default for FlagOptions {
    fn default() -> Self {
        FlagOptions {
            min_count: crate::metrics::DEFAULT_MIN_COUNT,
        }
    }
}

/// Triggers (with payloads) raised by `rules` on one window.
pub fn evaluate_rules(
    window: &Window,
    label: &NutritionLabel,
    rules: &[FlagRule],
    options: &FlagOptions,
) -> Result<Vec<(Trigger, Payload)>, HitlError> {
    let mut out = Vec::new();
    for rule in rules {
        rule.validate(label)?;
        let metric = rule.parsed_metric()?;
        for category in rule.categories(label) {
            let (baseline, cutoff) = rule.thresholds(label, &category)?;
            let trigger = |observed: f64| Trigger {
                rule_id: rule.rule_id.clone(),
                metric: rule.metric.clone(),
                scope: rule.scope,
                attribute: rule.attribute.clone(),
                subgroup: category.clone(),
                baseline,
                cutoff,
                observed,
            };
            let in_stratum = |r: &&JoinedRecord| r.event.category(&rule.attribute) == Some(category.as_str());
            match metric {
                FlagMetric::Rate(m) => {
                    let strata = stratified_metrics(&window.records, &rule.attribute, &label.subgroup_schema)
                        .map_err(|e| HitlError::InvalidRule(e.to_string()))?;
                    let Some(stratum) = strata.iter().find(|s| s.category == category) else { continue };
                    if stratum.outcome_bearing < options.min_count.max(1) {
                        continue;
                    }
                    let Some(observed) = stratum.rates.get(m) else { continue };
                    if should_flag(observed, baseline, cutoff) {
                        let records = window.records.iter().filter(in_stratum).cloned().collect();
                        out.push((
                            trigger(observed),
                            Payload::Window {
                                window: window.descriptor.clone(),
                                records,
                            },
                        ));
                    }
                }
                FlagMetric::Score => {
                    for record in window.records.iter().filter(in_stratum) {
                        if should_flag(record.event.score, baseline, cutoff) {
                            out.push((trigger(record.event.score), Payload::Observation { record: record.clone() }));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
}

impl ExportFilter {
    fn matches(&self, row: &RetrainingRow) -> bool {
        if let Some(id) = &self.item_id {
            if &row.item_id != id {
                return false;
            }
        }
        match (&self.attribute, &self.category) {
            (Some(a), Some(c)) => row.record.event.category(a) == Some(c.as_str()),
            (Some(a), None) => row.record.event.subgroup.contains_key(a),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub schema: String,
    pub schema_version: u32,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportAudit {
    pub machine_label: Label,
    pub outcome_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub item_id: String,
    pub event_id: String,
    pub model_version: String,
    pub subgroup: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BTreeMap<String, crate::model::FeatureValue>>,
    pub score: f64,
    /// Training label: the reviewer's for nudged rows, the outcome otherwise.
    pub label: Option<Label>,
    pub tag: String,
    pub audit: ExportAudit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueue {
    items: BTreeMap<String, ReviewItem>,
    retraining: RetrainingSet,
    audit: Vec<AuditEntry>,
    next_id: u64,
}

impl ReviewQueue {
    pub fn new() -> Self {
        ReviewQueue::default()
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values()
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values().filter(|i| i.status == ItemStatus::Pending)
    }

    pub fn retraining(&self) -> &RetrainingSet {
        &self.retraining
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    fn audit_push(&mut self, at: DateTime<Utc>, item_id: &str, action: &str, reviewer: Option<&str>, records: usize) {
        self.audit.push(AuditEntry {
            seq: self.audit.len() as u64,
            at,
            item_id: item_id.to_string(),
            action: action.to_string(),
            reviewer: reviewer.map(str::to_string),
            records,
        });
    }

    /// Evaluates the rules on a window and enqueues one pending item per
    /// violation.
    pub fn flag(
        &mut self,
        window: &Window,
        label: &NutritionLabel,
        rules: &[FlagRule],
        options: &FlagOptions,
        now: DateTime<Utc>,
    ) -> Result<Vec<ReviewItem>, HitlError> {
        let raised = evaluate_rules(window, label, rules, options)?;
        let mut created = Vec::with_capacity(raised.len());
        for (trigger, payload) in raised {
            let item = ReviewItem {
                item_id: format!("rv-{:06}", self.next_id),
                created_at: now,
                trigger,
                payload,
                status: ItemStatus::Pending,
                decision: None,
            };
            self.apply_event(QueueEvent::Flagged { item: Box::new(item.clone()) })?;
            created.push(item);
        }
        Ok(created)
    }

    /// Records a reviewer's decision and moves the payload into the
    /// retraining set.
    pub fn apply_decision(
        &mut self,
        item_id: &str,
        decision: DecisionKind,
        corrected_label: Option<Label>,
        reviewer: &str,
        now: DateTime<Utc>,
    ) -> Result<(ReviewItem, Vec<RetrainingRow>), HitlError> {
        let record = DecisionRecord {
            decision,
            reviewer: reviewer.to_string(),
            decided_at: now,
            corrected_label: if decision == DecisionKind::Nudge { corrected_label } else { None },
        };
        let before = self.retraining.rows.len();
        self.apply_event(QueueEvent::Decided {
            item_id: item_id.to_string(),
            decision: record,
        })?;
        Ok((self.items[item_id].clone(), self.retraining.rows[before..].to_vec()))
    }

    /// Applies one journal entry; the only mutation path, shared by live
    /// operations and replay.
    pub fn apply_event(&mut self, event: QueueEvent) -> Result<(), HitlError> {
        match event {
            QueueEvent::Flagged { item } => {
                let item = *item;
                if self.items.contains_key(&item.item_id) {
                    return Err(HitlError::AlreadyDecided(item.item_id));
                }
                if let Some(n) = item.item_id.strip_prefix("rv-").and_then(|n| n.parse::<u64>().ok()) {
                    self.next_id = self.next_id.max(n + 1);
                }
                let n = item.payload.records().len();
                self.audit_push(item.created_at, &item.item_id, "flagged", None, n);
                self.items.insert(item.item_id.clone(), item);
            }
            QueueEvent::Decided { item_id, decision } => {
                let item = self
                    .items
                    .get(&item_id)
                    .ok_or_else(|| HitlError::UnknownItem(item_id.clone()))?;
                if item.status != ItemStatus::Pending {
                    return Err(HitlError::AlreadyDecided(item_id));
                }
                let (status, tag) = match decision.decision {
                    DecisionKind::Approve => (ItemStatus::Approved, RowTag::Original),
                    DecisionKind::Prune => (ItemStatus::Pruned, RowTag::PrunedOut),
                    DecisionKind::Nudge => {
                        let corrected_label = decision
                            .corrected_label
                            .ok_or_else(|| HitlError::MissingCorrectedLabel(item_id.clone()))?;
                        (ItemStatus::Nudged, RowTag::Nudged { corrected_label })
                    }
                };
                let mut records: Vec<JoinedRecord> = item.payload.records().into_iter().cloned().collect();
                records.sort_by(|a, b| a.event.event_id.cmp(&b.event.event_id));
                let n = records.len();
                self.retraining.rows.extend(records.into_iter().map(|record| RetrainingRow {
                    item_id: item_id.clone(),
                    record,
                    tag: tag.clone(),
                }));
                let action = match status {
                    ItemStatus::Approved => "approved",
                    ItemStatus::Pruned => "pruned",
                    _ => "nudged",
                };
                self.audit_push(decision.decided_at, &item_id, action, Some(&decision.reviewer), n);
                let item = self.items.get_mut(&item_id).expect("checked above");
                item.status = status;
                item.decision = Some(decision);
            }
        }
        Ok(())
    }

    pub fn replay(events: impl IntoIterator<Item = QueueEvent>) -> Result<ReviewQueue, HitlError> {
        let mut queue = ReviewQueue::new();
        for e in events {
            queue.apply_event(e)?;
        }
        Ok(queue)
    }

    /// Trainable rows ordered by item then event id, preceded by a header
    /// line. Identical queue state gives byte-identical output.
    pub fn export_retraining_set(&self, filter: &ExportFilter) -> String {
        let mut rows: Vec<&RetrainingRow> = self
            .retraining
            .trainable()
            .filter(|r| filter.matches(r))
            .collect();
        rows.sort_by(|a, b| {
            a.item_id
                .cmp(&b.item_id)
                .then_with(|| a.record.event.event_id.cmp(&b.record.event.event_id))
        });
        let header = ExportHeader {
            schema: "fairgate.retraining_set".into(),
            schema_version: EXPORT_SCHEMA_VERSION,
            rows: rows.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for row in rows {
            let (label, tag) = match &row.tag {
                RowTag::Nudged { corrected_label } => (Some(*corrected_label), "nudged"),
                _ => (row.record.outcome_label, "original"),
            };
            let e = &row.record.event;
            let export = ExportRow {
                item_id: row.item_id.clone(),
                event_id: e.event_id.clone(),
                model_version: e.model_version.clone(),
                subgroup: e.subgroup.clone(),
                features: e.features.clone(),
                score: e.score,
                label,
                tag: tag.into(),
                audit: ExportAudit {
                    machine_label: e.predicted_label,
                    outcome_label: row.record.outcome_label,
                },
            };
            out.push_str(&serde_json::to_string(&export).expect("row serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses an export document back into header and rows.
pub fn parse_export(document: &str) -> Result<(ExportHeader, Vec<ExportRow>), String> {
    let mut lines = document.lines().filter(|l| !l.trim().is_empty());
    let header: ExportHeader = serde_json::from_str(lines.next().ok_or("missing header")?).map_err(|e| e.to_string())?;
    let rows = lines
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<Vec<ExportRow>, _>>()?;
    Ok((header, rows))
}
