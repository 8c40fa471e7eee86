//! SMOTE oversampling and Near-Miss (version 1) undersampling, usable with a
//! demographic attribute standing in for the class label.
//!
//! Distances are Euclidean on the vectors exactly as given. Callers that want
//! scaled features must scale before calling; nothing here rescales.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::error::Coded;
use crate::model::Label;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RebalanceError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("bad neighbour count: {0}")]
    BadK(String),
    #[error("invalid resample plan: {0}")]
    InvalidPlan(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

impl Coded for RebalanceError {
    fn code(&self) -> &'static str {
        match self {
            RebalanceError::TooFewSamples(_) => "TooFewSamples",
            RebalanceError::BadK(_) => "BadK",
            RebalanceError::InvalidPlan(_) => "InvalidPlan",
            RebalanceError::InvalidDataset(_) => "InvalidDataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub class_tag: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, class_tag: impl Into<String>) -> Self {
        FeatureVector {
            values,
            class_tag: class_tag.into(),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_vectors<'a>(sets: impl IntoIterator<Item = &'a [FeatureVector]>) -> Result<(), RebalanceError> {
    let mut dim = None;
    for set in sets {
        for v in set {
            if v.values.iter().any(|x| !x.is_finite()) {
                return Err(RebalanceError::InvalidDataset("non-finite feature value".into()));
            }
            match dim {
                None => dim = Some(v.values.len()),
                Some(d) if d != v.values.len() => {
                    return Err(RebalanceError::InvalidDataset(format!(
                        "mixed dimensionality {d} and {}",
                        v.values.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Indices of the `k` points of `pool` nearest to `query`, skipping
/// `exclude`. Ties go to the smaller index.
fn nearest(query: &[f64], pool: &[FeatureVector], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (i, euclidean(query, &p.values)))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// A generated minority point and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthetic {
    pub vector: FeatureVector,
    /// Index of the minority point it was interpolated from.
    pub source: usize,
    /// Index of the neighbour it was interpolated towards.
    pub neighbor: usize,
    /// Interpolation weight in `[0, 1]`.
    pub weight: f64,
}

/// Grows `minority` to `target_count` points by interpolating between each
/// point and one of its `k` nearest minority neighbours.
///
/// Sources are taken round-robin in input order; the neighbour and the weight
/// come from a ChaCha generator seeded with `seed`. A `k` larger than
/// `|minority| − 1` is clamped.
pub fn smote(
    minority: &[FeatureVector],
    target_count: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Synthetic>, RebalanceError> {
    if target_count == minority.len() {
        return Ok(Vec::new());
    }
    if target_count < minority.len() {
        return Err(RebalanceError::InvalidPlan(format!(
            "SMOTE target {target_count} below current count {}",
            minority.len()
        )));
    }
    if minority.len() < 2 {
        return Err(RebalanceError::TooFewSamples(format!(
            "SMOTE needs at least 2 minority points, got {}",
            minority.len()
        )));
    }
    if k == 0 {
        return Err(RebalanceError::BadK("k must be at least 1".into()));
    }
    check_vectors([minority])?;
    let k = if k > minority.len() - 1 {
        warn!(k, minority = minority.len(), "clamping SMOTE k to minority size - 1");
        minority.len() - 1
    } else {
        k
    };

    let mut neighbours: Vec<Option<Vec<usize>>> = vec![None; minority.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let needed = target_count - minority.len();
    let mut out = Vec::with_capacity(needed);
    for n in 0..needed {
        let source = n % minority.len();
        let nn = neighbours[source].get_or_insert_with(|| {
            nearest(&minority[source].values, minority, k, Some(source))
                .into_iter()
                .map(|(i, _)| i)
                .collect()
        });
        let neighbor = nn[rng.random_range(0..nn.len())];
        let weight: f64 = rng.random();
        let x = &minority[source].values;
        let y = &minority[neighbor].values;
        let values = x.iter().zip(y).map(|(a, b)| a + weight * (b - a)).collect();
        out.push(Synthetic {
            vector: FeatureVector::new(values, minority[source].class_tag.clone()),
            source,
            neighbor,
            weight,
        });
    }
    Ok(out)
}

/// Near-Miss version 1: keeps the `target_count` majority points whose mean
/// distance to their `k` nearest minority points is smallest.
///
/// Returns indices into `majority` in input order. Equal mean distances keep
/// the earlier index.
pub fn near_miss(
    majority: &[FeatureVector],
    minority: &[FeatureVector],
    target_count: usize,
    k: usize,
) -> Result<Vec<usize>, RebalanceError> {
    if target_count > majority.len() {
        return Err(RebalanceError::InvalidPlan(format!(
            "Near-Miss target {target_count} above majority size {}",
            majority.len()
        )));
    }
    if minority.is_empty() {
        return Err(RebalanceError::TooFewSamples("Near-Miss needs at least 1 minority point".into()));
    }
    if k == 0 || k > minority.len() {
        return Err(RebalanceError::BadK(format!(
            "k = {k} must lie in 1..={}",
            minority.len()
        )));
    }
    check_vectors([majority, minority])?;
    if target_count == majority.len() {
        return Ok((0..majority.len()).collect());
    }
    let mut scored: Vec<(usize, f64)> = majority
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = nearest(&p.values, minority, k, None);
            (i, nn.iter().map(|(_, d)| d).sum::<f64>() / k as f64)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut keep: Vec<usize> = scored.into_iter().take(target_count).map(|(i, _)| i).collect();
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Smote,
    NearMiss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub strategy: Strategy,
    /// Class tag to the number of rows it should end with.
    pub targets: BTreeMap<String, usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl ResamplePlan {
    /// Equal targets for every class.
    ///
    /// SMOTE with `match_majority` grows every class to the largest count;
    /// without it every class lands on the mean count, so the majority is
    /// trimmed with Near-Miss while the minority grows. Near-Miss shrinks
    /// every class to the smallest count.
    pub fn balanced(
        strategy: Strategy,
        counts: &BTreeMap<String, usize>,
        match_majority: bool,
        k: usize,
        seed: u64,
    ) -> Self {
        let target = match strategy {
            Strategy::Smote if match_majority => counts.values().copied().max().unwrap_or(0),
            Strategy::Smote => counts.values().sum::<usize>() / counts.len().max(1),
            Strategy::NearMiss => counts.values().copied().min().unwrap_or(0),
        };
        ResamplePlan {
            strategy,
            targets: counts.keys().map(|c| (c.clone(), target)).collect(),
            k,
            seed,
        }
    }

    pub fn validate(&self, counts: &BTreeMap<String, usize>) -> Result<(), RebalanceError> {
        if self.k == 0 {
            return Err(RebalanceError::BadK("k must be at least 1".into()));
        }
        for class in counts.keys() {
            if !self.targets.contains_key(class) {
                return Err(RebalanceError::InvalidPlan(format!("no target for class `{class}`")));
            }
        }
        for class in self.targets.keys() {
            if !counts.contains_key(class) {
                return Err(RebalanceError::InvalidPlan(format!("class `{class}` absent from dataset")));
            }
        }
        match self.strategy {
            Strategy::NearMiss => {
                if let Some((c, t)) = self.targets.iter().find(|(c, t)| **t > counts[*c]) {
                    return Err(RebalanceError::InvalidPlan(format!(
                        "near_miss cannot grow `{c}` from {} to {t}",
                        counts[c]
                    )));
                }
            }
            Strategy::Smote => {
                if let Some((c, n)) = counts.iter().min_by_key(|(_, n)| **n) {
                    if self.targets[c] < *n {
                        return Err(RebalanceError::InvalidPlan(format!(
                            "smote target for minority `{c}` below its count {n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One row of a retraining dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub row_id: String,
    pub values: Vec<f64>,
    pub subgroup: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_label: Option<Label>,
    /// Set on SMOTE-generated rows.
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_row: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceOutcome {
    pub attribute: String,
    pub rows: Vec<DatasetRow>,
    pub before: BTreeMap<String, ClassShare>,
    pub after: BTreeMap<String, ClassShare>,
    pub synthetic_rows: usize,
    pub removed_rows: usize,
}

fn shares(counts: &BTreeMap<String, usize>) -> BTreeMap<String, ClassShare> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(c, &n)| {
            (
                c.clone(),
                ClassShare {
                    count: n,
                    share: if total == 0 { 0.0 } else { n as f64 / total as f64 },
                },
            )
        })
        .collect()
}

/// Applies `plan` using `attribute`'s category as the class tag.
///
/// Classes below their target are grown with SMOTE (synthetic rows copy the
/// source row's task label and subgroup), classes above it are trimmed with
/// Near-Miss against all original rows of the other classes. The result is
/// shuffled with `plan.seed`.
pub fn rebalance_by_subgroup(
    rows: &[DatasetRow],
    attribute: &str,
    plan: &ResamplePlan,
) -> Result<RebalanceOutcome, RebalanceError> {
    let mut by_class: BTreeMap<String, Vec<&DatasetRow>> = BTreeMap::new();
    for row in rows {
        let class = row.subgroup.get(attribute).ok_or_else(|| {
            RebalanceError::InvalidDataset(format!("row `{}` has no `{attribute}`", row.row_id))
        })?;
        by_class.entry(class.clone()).or_default().push(row);
    }
    let counts: BTreeMap<String, usize> = by_class.iter().map(|(c, r)| (c.clone(), r.len())).collect();
    plan.validate(&counts)?;
    let vectors: BTreeMap<&String, Vec<FeatureVector>> = by_class
        .iter()
        .map(|(c, rows)| (c, rows.iter().map(|r| FeatureVector::new(r.values.clone(), c.clone())).collect()))
        .collect();
    check_vectors(vectors.values().map(Vec::as_slice))?;

    let mut out: Vec<DatasetRow> = Vec::with_capacity(plan.targets.values().sum());
    let mut synthetic_rows = 0;
    let mut removed_rows = 0;
    for (class_index, (class, class_rows)) in by_class.iter().enumerate() {
        let target = plan.targets[class];
        let current = class_rows.len();
        let own = &vectors[class];
        if target > current {
            let class_seed = plan.seed ^ (class_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let synthetic = smote(own, target, plan.k, class_seed)?;
            out.extend(class_rows.iter().map(|r| (*r).clone()));
            for (n, s) in synthetic.into_iter().enumerate() {
                let source = class_rows[s.source];
                out.push(DatasetRow {
                    row_id: format!("{}~syn{n}", source.row_id),
                    values: s.vector.values,
                    subgroup: source.subgroup.clone(),
                    task_label: source.task_label,
                    synthetic: true,
                    source_row: Some(source.row_id.clone()),
                });
                synthetic_rows += 1;
            }
        } else if target < current {
            let others: Vec<FeatureVector> = vectors
                .iter()
                .filter(|(c, _)| **c != class)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect();
            if others.is_empty() {
                return Err(RebalanceError::TooFewSamples(
                    "Near-Miss needs rows outside the class being trimmed".into(),
                ));
            }
            let k = if plan.k > others.len() {
                warn!(k = plan.k, available = others.len(), "clamping Near-Miss k");
                others.len()
            } else {
                plan.k
            };
            let keep = near_miss(own, &others, target, k)?;
            removed_rows += current - keep.len();
            out.extend(keep.into_iter().map(|i| class_rows[i].clone()));
        } else {
            out.extend(class_rows.iter().map(|r| (*r).clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    out.shuffle(&mut rng);

    let mut after: BTreeMap<String, usize> = BTreeMap::new();
    for row in &out {
        *after.entry(row.subgroup[attribute].clone()).or_default() += 1;
    }
    Ok(RebalanceOutcome {
        attribute: attribute.to_string(),
        rows: out,
        before: shares(&counts),
        after: shares(&after),
        synthetic_rows,
        removed_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(x: f64, y: f64) -> FeatureVector {
        FeatureVector::new(vec![x, y], "b")
    }

    #[test]
    fn smote_at_target_adds_nothing() {
        let m = vec![fv(0.0, 0.0), fv(1.0, 1.0)];
        assert!(smote(&m, 2, 1, 7).unwrap().is_empty());
    }

    #[test]
    fn smote_two_points_stays_on_diagonal() {
        let m = vec![fv(0.0, 0.0), fv(1.0, 1.0)];
        let s = smote(&m, 4, 1, 7).unwrap();
        assert_eq!(s.len(), 2);
        for syn in &s {
            let v = &syn.vector.values;
            assert_eq!(v[0], v[1]);
            assert!((0.0..=1.0).contains(&v[0]));
        }
    }

    #[test]
    fn smote_errors() {
        assert!(matches!(
            smote(&[fv(0.0, 0.0)], 3, 1, 0),
            Err(RebalanceError::TooFewSamples(_))
        ));
        assert!(matches!(
            smote(&[fv(0.0, 0.0), fv(1.0, 0.0)], 3, 0, 0),
            Err(RebalanceError::BadK(_))
        ));
        // k above |minority| - 1 is clamped, not rejected
        assert_eq!(smote(&[fv(0.0, 0.0), fv(1.0, 0.0)], 5, 9, 0).unwrap().len(), 3);
    }

    #[test]
    fn smote_is_deterministic() {
        let m: Vec<_> = (0..10).map(|i| fv(i as f64, (i * i) as f64)).collect();
        assert_eq!(smote(&m, 40, 3, 11).unwrap(), smote(&m, 40, 3, 11).unwrap());
        assert_ne!(smote(&m, 40, 3, 11).unwrap(), smote(&m, 40, 3, 12).unwrap());
    }

    #[test]
    fn near_miss_keeps_closest() {
        let minority = vec![FeatureVector::new(vec![0.0, 0.0], "b")];
        let majority: Vec<_> = [1.0, 2.0, 5.0, 6.0]
            .iter()
            .map(|y| FeatureVector::new(vec![0.0, *y], "a"))
            .collect();
        assert_eq!(near_miss(&majority, &minority, 2, 1).unwrap(), vec![0, 1]);
        assert_eq!(near_miss(&majority, &minority, 4, 1).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn near_miss_ties_keep_earlier_index() {
        let minority = vec![FeatureVector::new(vec![0.0, 0.0], "b")];
        let majority: Vec<_> = [(0.0, 3.0), (3.0, 0.0), (0.0, -3.0), (1.0, 0.0)]
            .iter()
            .map(|(x, y)| FeatureVector::new(vec![*x, *y], "a"))
            .collect();
        assert_eq!(near_miss(&majority, &minority, 2, 1).unwrap(), vec![0, 3]);
    }

    #[test]
    fn near_miss_errors() {
        let one = vec![fv(0.0, 0.0)];
        assert!(matches!(near_miss(&one, &[], 1, 1), Err(RebalanceError::TooFewSamples(_))));
        assert!(matches!(near_miss(&one, &one, 1, 2), Err(RebalanceError::BadK(_))));
        assert!(matches!(near_miss(&one, &one, 2, 1), Err(RebalanceError::InvalidPlan(_))));
    }

    fn rows(split: &[(&str, usize)]) -> Vec<DatasetRow> {
        let mut out = Vec::new();
        for (class, n) in split {
            for i in 0..*n {
                out.push(DatasetRow {
                    row_id: format!("{class}{i}"),
                    values: vec![i as f64, (i % 7) as f64 + if *class == "a" { 0.0 } else { 10.0 }],
                    subgroup: BTreeMap::from([("g".to_string(), class.to_string())]),
                    task_label: Some(Label::from(i % 2 == 0)),
                    synthetic: false,
                    source_row: None,
                });
            }
        }
        out
    }

    fn tally(rows: &[DatasetRow]) -> BTreeMap<String, usize> {
        let mut t = BTreeMap::new();
        for r in rows {
            *t.entry(r.subgroup["g"].clone()).or_default() += 1;
        }
        t
    }

    #[test]
    fn balanced_input_is_a_permutation() {
        let input = rows(&[("a", 20), ("b", 20)]);
        let counts = tally(&input);
        let plan = ResamplePlan::balanced(Strategy::Smote, &counts, true, 5, 3);
        let out = rebalance_by_subgroup(&input, "g", &plan).unwrap();
        let mut ids: Vec<_> = out.rows.iter().map(|r| r.row_id.clone()).collect();
        let mut expected: Vec<_> = input.iter().map(|r| r.row_id.clone()).collect();
        ids.sort();
        expected.sort();
        assert_eq!(ids, expected);
        assert_eq!(out.synthetic_rows, 0);
    }

    #[test]
    fn near_miss_plan_trims_majority_to_minority() {
        let input = rows(&[("a", 89), ("b", 11)]);
        let plan = ResamplePlan::balanced(Strategy::NearMiss, &tally(&input), false, 3, 3);
        let out = rebalance_by_subgroup(&input, "g", &plan).unwrap();
        assert_eq!(tally(&out.rows), BTreeMap::from([("a".into(), 11), ("b".into(), 11)]));
        assert_eq!(out.removed_rows, 78);
        assert!(out.rows.iter().all(|r| !r.synthetic));
    }

    #[test]
    fn plan_validation() {
        let counts = BTreeMap::from([("a".to_string(), 10), ("b".to_string(), 2)]);
        let mut plan = ResamplePlan::balanced(Strategy::NearMiss, &counts, false, 1, 0);
        plan.targets.insert("a".into(), 11);
        assert!(matches!(plan.validate(&counts), Err(RebalanceError::InvalidPlan(_))));
        let mut plan = ResamplePlan::balanced(Strategy::Smote, &counts, true, 1, 0);
        plan.targets.insert("b".into(), 1);
        assert!(matches!(plan.validate(&counts), Err(RebalanceError::InvalidPlan(_))));
        plan.targets.remove("b");
        assert!(matches!(plan.validate(&counts), Err(RebalanceError::InvalidPlan(_))));
    }
}
