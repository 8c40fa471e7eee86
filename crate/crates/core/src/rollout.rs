//! Staged canary rollouts gated on parity, blue/green arm comparison and
//! stratified treatment/control assignment.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::Coded;
use crate::metrics::{
    parity_report, stratified_metrics, MetricsConfig, ParityMetric, ParityReport, RateMetric, StratumMetrics,
    MISSING_CATEGORY,
};
use crate::model::{JoinedRecord, NutritionLabel, Window, WindowSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RolloutError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("rollout `{0}` is not running")]
    RolloutNotRunning(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("experiment `{0}` is not active")]
    ExperimentNotActive(String),
}

impl Coded for RolloutError {
    fn code(&self) -> &'static str {
        match self {
            RolloutError::InvalidPlan(_) => "InvalidPlan",
            RolloutError::RolloutNotRunning(_) => "RolloutNotRunning",
            RolloutError::InvalidTransition(_) => "InvalidTransition",
            RolloutError::ExperimentNotActive(_) => "ExperimentNotActive",
        }
    }
}

/// Uniform value in `[0, 1)` from a SHA-256 of the labelled parts.
fn unit_hash(parts: &[&str]) -> f64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// `attr=value` pairs for the given attributes, joined with `;`.
pub fn stratum_key(subgroup: &BTreeMap<String, String>, attributes: &[String]) -> String {
    attributes
        .iter()
        .map(|a| format!("{a}={}", subgroup.get(a).map_or(MISSING_CATEGORY, String::as_str)))
        .collect::<Vec<_>>()
        .join(";")
}

// ---------------------------------------------------------------------------
// canary

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub fraction: f64,
    #[serde(default)]
    pub min_duration_secs: i64,
    #[serde(default)]
    pub min_events: usize,
}

pub const DEFAULT_STAGE_FRACTIONS: [f64; 4] = [0.05, 0.25, 0.5, 1.0];

pub fn default_stages(min_duration_secs: i64, min_events: usize) -> Vec<Stage> {
    DEFAULT_STAGE_FRACTIONS
        .iter()
        .map(|&fraction| Stage {
            fraction,
            min_duration_secs,
            min_events,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub max_parity_gap: BTreeMap<ParityMetric, f64>,
    /// Check every monitored subgroup's rates against the label's bands.
    pub enforce_bands: bool,
    pub min_count: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            max_parity_gap: ParityMetric::ALL.iter().map(|m| (*m, 0.10)).collect(),
            enforce_bands: true,
            min_count: crate::metrics::DEFAULT_MIN_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanaryPlan {
    pub rollout_id: String,
    /// The challenger being rolled out.
    pub model_version: String,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub gates: GateConfig,
    pub cohort_attributes: Vec<String>,
}

impl CanaryPlan {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let invalid = |m: String| Err(RolloutError::InvalidPlan(m));
        if self.rollout_id.trim().is_empty() {
            return invalid("rollout_id must be non-empty".into());
        }
        if self.stages.is_empty() {
            return invalid("at least one stage is required".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.fraction > 0.0 && s.fraction <= 1.0) {
                return invalid(format!("stage {i} fraction {} outside (0, 1]", s.fraction));
            }
            if s.min_duration_secs < 0 {
                return invalid(format!("stage {i} has a negative min_duration_secs"));
            }
        }
        if let Some(i) = self.stages.windows(2).position(|w| w[1].fraction <= w[0].fraction) {
            return invalid(format!(
                "stage fractions must be strictly increasing (stage {} -> {})",
                i,
                i + 1
            ));
        }
        let last = self.stages.last().expect("non-empty").fraction;
        if last != 1.0 {
            return invalid(format!("final stage fraction must be 1.0, got {last}"));
        }
        for (metric, t) in &self.gates.max_parity_gap {
            if !(0.0..=1.0).contains(t) {
                return invalid(format!("gate threshold for {metric} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Pending,
    Running,
    RolledBack,
    Completed,
}

impl RolloutStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RolloutStatus::RolledBack | RolloutStatus::Completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOutcome {
    Pass,
    Fail,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateViolation {
    /// Parity metric name, or the rate metric for a band violation.
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    pub observed: f64,
    /// The threshold or band bound that was crossed.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub outcome: GateOutcome,
    pub stage: usize,
    pub events_observed: usize,
    pub elapsed_secs: i64,
    pub violations: Vec<GateViolation>,
    pub notes: Vec<String>,
}

impl GateResult {
    pub fn failing_metrics(&self) -> BTreeSet<&str> {
        self.violations.iter().map(|v| v.metric.as_str()).collect()
    }
}

/// Observations gathered from the canary cohort during one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub events: usize,
    pub elapsed_secs: i64,
    pub parity: Vec<ParityReport>,
    pub strata: BTreeMap<String, Vec<StratumMetrics>>,
}

impl StageMetrics {
    /// Parity and per-subgroup rates over the stage's records for each
    /// cohort attribute. `events` counts outcome-bearing records.
    pub fn from_records(
        records: &[JoinedRecord],
        attributes: &[String],
        label: &NutritionLabel,
        min_count: usize,
        elapsed_secs: i64,
    ) -> Self {
        let window = Window::new(WindowSpec::Count { size: records.len().max(1) }, 0, records.to_vec());
        let config = MetricsConfig { min_count };
        let mut parity = Vec::new();
        let mut strata = BTreeMap::new();
        for attribute in attributes.iter().filter(|a| label.has_attribute(a)) {
            parity.push(parity_report(&window, attribute, label, &config).expect("attribute in schema"));
            strata.insert(
                attribute.clone(),
                stratified_metrics(records, attribute, &label.subgroup_schema).expect("attribute in schema"),
            );
        }
        StageMetrics {
            events: window.descriptor.outcome_bearing,
            elapsed_secs,
            parity,
            strata,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Start,
    /// Gate passed on a non-final stage; exposure moves to the next stage.
    Promote,
    Complete,
    Rollback,
    Abort,
    /// Gate evaluated as insufficient; nothing changes.
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub kind: TransitionKind,
    pub from_stage: usize,
    pub to_stage: usize,
    pub status: RolloutStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryState {
    pub plan: CanaryPlan,
    pub status: RolloutStatus,
    pub current_stage: usize,
    #[serde(default)]
    pub stage_started_at: Option<DateTime<Utc>>,
    pub log: Vec<Transition>,
}

/// Validates the plan and returns its pending state.
pub fn plan_canary(plan: CanaryPlan) -> Result<CanaryState, RolloutError> {
    plan.validate()?;
    Ok(CanaryState {
        plan,
        status: RolloutStatus::Pending,
        current_stage: 0,
        stage_started_at: None,
        log: Vec::new(),
    })
}

impl CanaryState {
    pub fn id(&self) -> &str {
        &self.plan.rollout_id
    }

    pub fn stage(&self) -> &Stage {
        &self.plan.stages[self.current_stage]
    }

    /// Traffic share currently routed to the challenger.
    pub fn current_fraction(&self) -> f64 {
        match self.status {
            RolloutStatus::Running => self.stage().fraction,
            RolloutStatus::Completed => 1.0,
            RolloutStatus::Pending | RolloutStatus::RolledBack => 0.0,
        }
    }

    /// Largest fraction the rollout was ever exposed at.
    pub fn max_fraction_reached(&self) -> f64 {
        self.log
            .iter()
            .filter(|t| t.kind != TransitionKind::Rollback && t.kind != TransitionKind::Abort)
            .map(|t| match t.status {
                RolloutStatus::Completed => 1.0,
                _ => self.plan.stages[t.to_stage].fraction,
            })
            .fold(0.0, f64::max)
    }

    pub fn gate_results(&self) -> impl Iterator<Item = &GateResult> {
        self.log.iter().filter_map(|t| t.gate.as_ref())
    }

    fn push(&mut self, at: DateTime<Utc>, kind: TransitionKind, to_stage: usize, status: RolloutStatus, gate: Option<GateResult>, reason: Option<String>) -> &Transition {
        let from_stage = self.current_stage;
        if matches!(kind, TransitionKind::Start | TransitionKind::Promote) {
            self.stage_started_at = Some(at);
        }
        self.current_stage = to_stage;
        self.status = status;
        self.log.push(Transition {
            seq: self.log.len() as u64,
            at,
            kind,
            from_stage,
            to_stage,
            status,
            gate,
            reason,
        });
        self.log.last().expect("just pushed")
    }

    pub fn start(&mut self, now: DateTime<Utc>) -> Result<&Transition, RolloutError> {
        if self.status != RolloutStatus::Pending {
            return Err(RolloutError::InvalidTransition(format!(
                "cannot start rollout `{}` in status {:?}",
                self.id(),
                self.status
            )));
        }
        Ok(self.push(now, TransitionKind::Start, 0, RolloutStatus::Running, None, None))
    }

    /// Applies a gate result: pass promotes (or completes on the last stage),
    /// fail rolls back, insufficient holds.
    pub fn advance(&mut self, gate: GateResult, now: DateTime<Utc>) -> Result<&Transition, RolloutError> {
        if self.status != RolloutStatus::Running {
            return Err(RolloutError::InvalidTransition(format!(
                "cannot advance rollout `{}` in status {:?}",
                self.id(),
                self.status
            )));
        }
        if gate.stage != self.current_stage {
            return Err(RolloutError::InvalidTransition(format!(
                "gate evaluated for stage {} but rollout is at stage {}",
                gate.stage, self.current_stage
            )));
        }
        let stage = self.current_stage;
        let last = stage + 1 == self.plan.stages.len();
        Ok(match gate.outcome {
            GateOutcome::Pass if last => {
                self.push(now, TransitionKind::Complete, stage, RolloutStatus::Completed, Some(gate), None)
            }
            GateOutcome::Pass => self.push(now, TransitionKind::Promote, stage + 1, RolloutStatus::Running, Some(gate), None),
            GateOutcome::Fail => {
                let reason = format!("gate failed on {}", gate.failing_metrics().into_iter().collect::<Vec<_>>().join(", "));
                self.push(now, TransitionKind::Rollback, stage, RolloutStatus::RolledBack, Some(gate), Some(reason))
            }
            GateOutcome::Insufficient => self.push(now, TransitionKind::Hold, stage, RolloutStatus::Running, Some(gate), None),
        })
    }

    /// Operator abort. Allowed from any non-terminal state.
    pub fn abort(&mut self, reason: impl Into<String>, now: DateTime<Utc>) -> Result<&Transition, RolloutError> {
        if self.status.is_terminal() {
            return Err(RolloutError::InvalidTransition(format!(
                "rollout `{}` already {:?}",
                self.id(),
                self.status
            )));
        }
        let stage = self.current_stage;
        Ok(self.push(now, TransitionKind::Abort, stage, RolloutStatus::RolledBack, None, Some(reason.into())))
    }

    /// Applies one logged transition by re-running the operation it records.
    pub fn apply(&mut self, t: &Transition) -> Result<(), RolloutError> {
        if t.seq != self.log.len() as u64 {
            return Err(RolloutError::InvalidTransition(format!(
                "log sequence {} out of order (expected {})",
                t.seq,
                self.log.len()
            )));
        }
        match t.kind {
            TransitionKind::Start => {
                self.start(t.at)?;
            }
            TransitionKind::Abort => {
                self.abort(t.reason.clone().unwrap_or_default(), t.at)?;
            }
            _ => {
                let gate = t
                    .gate
                    .clone()
                    .ok_or_else(|| RolloutError::InvalidTransition(format!("transition {} lacks a gate result", t.seq)))?;
                self.advance(gate, t.at)?;
            }
        }
        if self.log.last() != Some(t) {
            return Err(RolloutError::InvalidTransition(format!(
                "transition {} does not follow from the preceding log",
                t.seq
            )));
        }
        Ok(())
    }

    /// Rebuilds a state from its plan and transition log.
    pub fn replay(plan: CanaryPlan, log: &[Transition]) -> Result<CanaryState, RolloutError> {
        let mut state = plan_canary(plan)?;
        for t in log {
            state.apply(t)?;
        }
        Ok(state)
    }

    /// Hash-based cohort assignment, stratified by `stratum`.
    pub fn assign_cohort(&self, subject_id: &str, stratum: &str, salt: &str) -> Result<Cohort, RolloutError> {
        if self.status != RolloutStatus::Running {
            return Err(RolloutError::RolloutNotRunning(self.id().to_string()));
        }
        Ok(assign_cohort(subject_id, stratum, self.current_fraction(), salt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Canary,
    Stable,
}

/// Pure assignment: a subject is in the canary when its hash within the
/// stratum falls below `fraction`. Raising the fraction never moves a subject
/// out of the canary.
pub fn assign_cohort(subject_id: &str, stratum: &str, fraction: f64, salt: &str) -> Cohort {
    if unit_hash(&["cohort", salt, stratum, subject_id]) < fraction {
        Cohort::Canary
    } else {
        Cohort::Stable
    }
}

/// Gate decision for the running stage.
pub fn evaluate_gate(state: &CanaryState, metrics: &StageMetrics, label: &NutritionLabel) -> GateResult {
    let stage_index = state.current_stage;
    let mut result = GateResult {
        outcome: GateOutcome::Insufficient,
        stage: stage_index,
        events_observed: metrics.events,
        elapsed_secs: metrics.elapsed_secs,
        violations: Vec::new(),
        notes: Vec::new(),
    };
    if state.status != RolloutStatus::Running {
        result.notes.push(format!("rollout is {:?}", state.status));
        return result;
    }
    let stage = state.stage();
    if metrics.events < stage.min_events {
        result.notes.push(format!("{} of {} events observed", metrics.events, stage.min_events));
    }
    if metrics.elapsed_secs < stage.min_duration_secs {
        result.notes.push(format!(
            "{}s of {}s minimum duration elapsed",
            metrics.elapsed_secs, stage.min_duration_secs
        ));
    }
    if !result.notes.is_empty() {
        return result;
    }

    let gates = &state.plan.gates;
    let mut insufficient = false;
    for report in &metrics.parity {
        for pair in &report.pairs {
            for (metric, &limit) in &gates.max_parity_gap {
                match pair.gap(*metric).value() {
                    Some(v) if v > limit => result.violations.push(GateViolation {
                        metric: metric.as_str().to_string(),
                        subgroup: Some(format!("{}={}", report.attribute, pair.other_subgroup)),
                        observed: v,
                        limit,
                    }),
                    Some(_) => {}
                    None => {
                        insufficient = true;
                        result.notes.push(format!(
                            "{metric} for {}={} has insufficient data",
                            report.attribute, pair.other_subgroup
                        ));
                    }
                }
            }
        }
    }
    if gates.enforce_bands {
        for (attribute, strata) in &metrics.strata {
            for entry in label.entries_for(attribute) {
                if entry.acceptable_band.is_empty() {
                    continue;
                }
                let stratum = strata.iter().find(|s| s.category == entry.category);
                let support = stratum.map_or(0, |s| s.outcome_bearing);
                if support < gates.min_count.max(1) {
                    insufficient = true;
                    result.notes.push(format!(
                        "{attribute}={} has {support} outcome-bearing records (< {})",
                        entry.category, gates.min_count
                    ));
                    continue;
                }
                let rates = stratum.expect("support > 0").rates;
                for (metric, band) in &entry.acceptable_band {
                    let Some(observed) = rates.get(*metric) else { continue };
                    if !band.contains(observed) {
                        result.violations.push(GateViolation {
                            metric: metric.as_str().to_string(),
                            subgroup: Some(format!("{attribute}={}", entry.category)),
                            observed,
                            limit: if observed < band.low() { band.low() } else { band.high() },
                        });
                    }
                }
            }
        }
    }
    result.outcome = if !result.violations.is_empty() {
        GateOutcome::Fail
    } else if insufficient {
        GateOutcome::Insufficient
    } else {
        GateOutcome::Pass
    };
    result
}

// ---------------------------------------------------------------------------
// experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    #[serde(default = "half")]
    pub treatment_share: f64,
    pub attributes: Vec<String>,
    #[serde(default = "yes")]
    pub active: bool,
}

fn half() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentAssignment {
    pub subject_id: String,
    pub arm: Arm,
    pub stratum: String,
    pub salt: String,
}

/// Deterministic, stratified treatment/control split.
pub fn assign_arm(
    subject_id: &str,
    subgroup: &BTreeMap<String, String>,
    config: &ExperimentConfig,
    salt: &str,
) -> Result<ExperimentAssignment, RolloutError> {
    if !config.active {
        return Err(RolloutError::ExperimentNotActive(config.experiment_id.clone()));
    }
    let stratum = stratum_key(subgroup, &config.attributes);
    let u = unit_hash(&["arm", &config.experiment_id, salt, &stratum, subject_id]);
    let arm = if u < config.treatment_share { Arm::Treatment } else { Arm::Control };
    Ok(ExperimentAssignment {
        subject_id: subject_id.to_string(),
        arm,
        stratum,
        salt: salt.to_string(),
    })
}

/// An experiment with its recorded assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub salt: String,
    pub assignments: BTreeMap<String, ExperimentAssignment>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, salt: impl Into<String>) -> Self {
        Experiment {
            config,
            salt: salt.into(),
            assignments: BTreeMap::new(),
        }
    }

    pub fn assign(&mut self, subject_id: &str, subgroup: &BTreeMap<String, String>) -> Result<&ExperimentAssignment, RolloutError> {
        let assignment = assign_arm(subject_id, subgroup, &self.config, &self.salt)?;
        Ok(self.assignments.entry(subject_id.to_string()).or_insert(assignment))
    }
}

// ---------------------------------------------------------------------------
// blue / green

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Model,
    /// A rule-based stand-in with no learned model behind it.
    RuleBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmTag {
    pub name: String,
    #[serde(default = "model_kind")]
    pub kind: ArmKind,
}

fn model_kind() -> ArmKind {
    ArmKind::Model
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpiConfig {
    pub attribute: String,
    pub primary: ParityMetric,
    /// Required improvement in the primary gap before switching.
    pub margin: f64,
    pub min_count: usize,
}

impl Default for KpiConfig {
    fn default() -> Self {
        KpiConfig {
            attribute: String::new(),
            primary: ParityMetric::EqualizedOdds,
            margin: 0.05,
            min_count: crate::metrics::DEFAULT_MIN_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub tag: ArmTag,
    pub parity: ParityReport,
    pub strata: Vec<StratumMetrics>,
}

impl ArmMetrics {
    pub fn compute(tag: ArmTag, records: &[JoinedRecord], label: &NutritionLabel, kpi: &KpiConfig) -> Result<Self, crate::metrics::MetricsError> {
        let window = Window::new(WindowSpec::Count { size: records.len().max(1) }, 0, records.to_vec());
        let parity = parity_report(&window, &kpi.attribute, label, &MetricsConfig { min_count: kpi.min_count })?;
        let strata = stratified_metrics(records, &kpi.attribute, &label.subgroup_schema)?;
        Ok(ArmMetrics { tag, parity, strata })
    }

    fn support(&self, category: &str) -> usize {
        self.strata.iter().find(|s| s.category == category).map_or(0, |s| s.outcome_bearing)
    }

    /// Lowest F1 over the given subgroups, with the subgroup it belongs to.
    fn worst_f1(&self, categories: &[String]) -> Option<(String, f64)> {
        categories
            .iter()
            .filter_map(|c| {
                self.strata
                    .iter()
                    .find(|s| &s.category == c)
                    .and_then(|s| s.rates.f1)
                    .map(|f| (c.clone(), f))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    KeepBlue,
    SwitchToGreen,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub blue: Option<f64>,
    pub green: Option<f64>,
    /// `green − blue` when both are defined.
    pub delta: Option<f64>,
}

impl MetricDelta {
    fn new(blue: Option<f64>, green: Option<f64>) -> Self {
        MetricDelta {
            blue,
            green,
            delta: blue.zip(green).map(|(b, g)| g - b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstSubgroup {
    pub subgroup: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub blue: ArmTag,
    pub green: ArmTag,
    pub primary: ParityMetric,
    pub margin: f64,
    pub parity: BTreeMap<ParityMetric, MetricDelta>,
    pub subgroups: BTreeMap<String, BTreeMap<RateMetric, MetricDelta>>,
    pub worst_subgroup_blue: Option<WorstSubgroup>,
    pub worst_subgroup_green: Option<WorstSubgroup>,
    pub decision: Decision,
    pub notes: Vec<String>,
}

/// Compares two arms on parity. The arm with the strictly smaller primary gap
/// wins when the difference exceeds the margin and both arms have enough
/// outcomes in every monitored subgroup.
pub fn compare_arms(blue: &ArmMetrics, green: &ArmMetrics, label: &NutritionLabel, kpi: &KpiConfig) -> ComparisonReport {
    let monitored: Vec<String> = label.entries_for(&kpi.attribute).map(|e| e.category.clone()).collect();
    let mut notes = Vec::new();
    for (arm, name) in [(blue, "blue"), (green, "green")] {
        for c in &monitored {
            let n = arm.support(c);
            if n < kpi.min_count.max(1) {
                notes.push(format!(
                    "{name} arm has {n} outcome-bearing records for {}={c} (< {})",
                    kpi.attribute, kpi.min_count
                ));
            }
        }
    }

    let parity = ParityMetric::ALL
        .iter()
        .map(|m| (*m, MetricDelta::new(blue.parity.max_gap(*m), green.parity.max_gap(*m))))
        .collect::<BTreeMap<_, _>>();

    let categories: BTreeSet<&String> = blue.strata.iter().chain(&green.strata).map(|s| &s.category).collect();
    let subgroups = categories
        .into_iter()
        .map(|c| {
            let rates = |arm: &ArmMetrics| arm.strata.iter().find(|s| &s.category == c).map(|s| s.rates);
            let (b, g) = (rates(blue), rates(green));
            let per_metric = RateMetric::ALL
                .iter()
                .map(|m| (*m, MetricDelta::new(b.and_then(|r| r.get(*m)), g.and_then(|r| r.get(*m)))))
                .collect();
            (c.clone(), per_metric)
        })
        .collect();

    let worst = |arm: &ArmMetrics| arm.worst_f1(&monitored).map(|(subgroup, f1)| WorstSubgroup { subgroup, f1 });

    let decision = if !notes.is_empty() {
        Decision::Undecided
    } else {
        match (&parity[&kpi.primary].blue, &parity[&kpi.primary].green) {
            (Some(b), Some(g)) if b - g > kpi.margin => Decision::SwitchToGreen,
            (Some(b), Some(g)) if g - b > kpi.margin => Decision::KeepBlue,
            (Some(_), Some(_)) => {
                notes.push(format!("primary gap difference within margin {}", kpi.margin));
                Decision::Undecided
            }
            _ => {
                notes.push(format!("{} undefined for an arm", kpi.primary));
                Decision::Undecided
            }
        }
    };

    ComparisonReport {
        blue: blue.tag.clone(),
        green: green.tag.clone(),
        primary: kpi.primary,
        margin: kpi.margin,
        parity,
        subgroups,
        worst_subgroup_blue: worst(blue),
        worst_subgroup_green: worst(green),
        decision,
        notes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlueGreenComparison {
    pub comparison_id: String,
    pub kpi: KpiConfig,
    pub report: ComparisonReport,
}

impl BlueGreenComparison {
    pub fn decision(&self) -> Decision {
        self.report.decision
    }
}
