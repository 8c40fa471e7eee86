//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p fairgate-gateway --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration as StdDuration, Instant};

use chrono::Duration;
use common::*;
use fairgate_core::drift::{psi, DistributionSnapshot, DriftStatus, DriftThresholds};
use fairgate_core::hitl::{
    evaluate_rules, should_flag, Cutoff, DecisionKind, FlagOptions, FlagRule, FlagScope, ItemStatus,
};
use fairgate_core::metrics::{parity_report, MetricsConfig, ParityMetric, RateMetric};
use fairgate_core::model::{Label, Window, WindowSpec};
use fairgate_core::rebalance::{euclidean, near_miss, rebalance_by_subgroup, DatasetRow, FeatureVector, ResamplePlan, Strategy};
use fairgate_core::rollout::{Decision, RolloutStatus, Stage};
use fairgate_core::simulator::run_named;
use fairgate_gateway::config::ServiceConfig;
use fairgate_gateway::persist::{DataDir, WriteOp, WriteTrace};
use fairgate_gateway::service::{
    AbortRequest, AdvanceRequest, ArmSpec, ComparisonRequest, DecisionRequest, FlagRequest, RolloutRequest, Service,
    ServiceSnapshot,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Option<StdDuration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "parity arithmetic", budget: Some(StdDuration::from_secs(1)), run: parity_arithmetic },
        Criterion { name: "drift example psi", budget: Some(StdDuration::from_secs(1)), run: drift_example },
        Criterion { name: "flagging band", budget: None, run: flagging_band },
        Criterion { name: "smote balancing", budget: Some(StdDuration::from_secs(5)), run: smote_balancing },
        Criterion { name: "near-miss oracle", budget: Some(StdDuration::from_secs(10)), run: near_miss_oracle },
        Criterion { name: "canary safety", budget: Some(StdDuration::from_secs(120)), run: canary_safety },
        Criterion { name: "blue/green decision", budget: None, run: blue_green },
        Criterion { name: "label band failure", budget: None, run: label_band_failure },
        Criterion { name: "crash consistency", budget: None, run: crash_consistency },
        Criterion { name: "cli/http equivalence", budget: None, run: cli_http_equivalence },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {:>2} {:<22} {detail} [{elapsed:.2?}]", i + 1, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {:<22} {why} [{elapsed:.2?}]", i + 1, c.name);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn e<T>(r: Result<T, fairgate_gateway::error::ApiError>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1 ---------------------------------------------------------------------------

fn parity_arithmetic() -> Outcome {
    let batch = Batch::new(&[("a", PARITY_A), ("b", PARITY_B)]);
    let pairs = batch.pairs();

    // brute force: count frequencies over the enumerated records
    let freq = |group: &str, cond: &dyn Fn(bool) -> bool| {
        let rows: Vec<_> = pairs
            .iter()
            .filter(|(e, o)| e.subgroup[ATTR] == group && cond(o.outcome_label.is_positive()))
            .collect();
        let positive = rows.iter().filter(|(e, _)| e.predicted_label.is_positive()).count();
        positive as f64 / rows.len() as f64
    };
    let selection = |g| freq(g, &|_| true);
    let tpr = |g| freq(g, &|y| y);
    let fpr = |g| freq(g, &|y| !y);
    let oracle_dp = (selection("a") - selection("b")).abs();
    let oracle_eo = (tpr("a") - tpr("b")).abs();
    let oracle_eodds = oracle_eo.max((fpr("a") - fpr("b")).abs());

    let mut service = Service::ephemeral(ServiceConfig::default());
    service.put_label(MV, &label_json(&parity_label())).map_err(|e| e.to_string())?;
    service.ingest_events(&batch.events()).map_err(|e| e.to_string())?;
    service.ingest_outcomes(&batch.outcomes()).map_err(|e| e.to_string())?;
    let q = fairgate_gateway::service::WindowQuery {
        model_version: MV.into(),
        attribute: Some(ATTR.into()),
        window: None,
    };
    let report = service.parity(&q).map_err(|e| e.to_string())?;
    let pair = &report.pairs[0];
    let got = |m: ParityMetric| pair.gap(m).value().ok_or(format!("{m} undefined"));
    let (dp, eo, eodds) = (
        got(ParityMetric::DemographicParity)?,
        got(ParityMetric::EqualOpportunity)?,
        got(ParityMetric::EqualizedOdds)?,
    );
    for (name, value, oracle, stated) in [
        ("demographic", dp, oracle_dp, 0.15),
        ("equal-opportunity", eo, oracle_eo, 0.30),
        ("equalized-odds", eodds, oracle_eodds, 0.30),
    ] {
        ensure!(close(value, oracle, 1e-12), "{name} {value} vs oracle {oracle}");
        ensure!(close(value, stated, 1e-12), "{name} {value} vs {stated}");
    }

    // same numbers straight from the core, without the service
    let records = service.store(MV).unwrap().records().to_vec();
    let window = Window::new(WindowSpec::Count { size: records.len() }, 0, records);
    let direct = parity_report(&window, ATTR, &parity_label(), &MetricsConfig::default()).map_err(|e| e.to_string())?;
    ensure!(direct.pairs == report.pairs, "service and core gaps differ");
    Ok(format!("gaps {dp:.2}/{eo:.2}/{eodds:.2} match oracle to 1e-12"))
}

// 2 ---------------------------------------------------------------------------

fn drift_example() -> Outcome {
    let shares = |a: f64, b: f64| BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
    let training = DistributionSnapshot::from_shares(shares(0.95, 0.05), 10_000);
    let live = DistributionSnapshot::from_shares(shares(0.89, 0.11), 10_000);
    let value = psi(&training, &live).map_err(|e| e.to_string())?;
    // closed form: sum (q - p) ln(q / p)
    let oracle = (0.89 - 0.95) * (0.89f64 / 0.95).ln() + (0.11 - 0.05) * (0.11f64 / 0.05).ln();
    ensure!(close(value, oracle, 1e-12), "psi {value} vs closed form {oracle}");
    ensure!(close(value, 0.0512, 1e-4), "psi {value} not 0.0512 ± 1e-4");
    let t = DriftThresholds::default();
    let status = DriftStatus::classify(value, t.psi_watch, t.psi_alert);
    ensure!(status == DriftStatus::Watch, "classified {status:?}");
    Ok(format!("psi {value:.5}, status watch"))
}

// 3 ---------------------------------------------------------------------------

fn flagging_band() -> Outcome {
    let (baseline, cutoff) = (0.88, 0.84);
    let cases = [(0.84, true), (0.83, true), (0.85, false), (0.88, false)];
    for (observed, expected) in cases {
        ensure!(should_flag(observed, baseline, cutoff) == expected, "observed {observed}: expected flag={expected}");
    }

    // end to end: a per-observation rule written as a delta below the baseline
    let rule = FlagRule {
        rule_id: "band".into(),
        metric: "score".into(),
        scope: FlagScope::PerObservation,
        attribute: ATTR.into(),
        subgroup: Some("a".into()),
        cutoff: Cutoff::Delta(0.04),
        baseline: Some(baseline),
    };
    let mut records = Batch::new(&[("a", (4, 0, 0, 0))]).pairs();
    for ((event, _), (score, _)) in records.iter_mut().zip(cases) {
        event.score = score;
    }
    let joined: Vec<_> = records
        .into_iter()
        .map(|(e, o)| {
            let mut r = fairgate_core::model::JoinedRecord::pending(e);
            r.outcome_label = Some(o.outcome_label);
            r
        })
        .collect();
    let window = Window::new(WindowSpec::Count { size: 4 }, 0, joined);
    let label = label_for(&[("a", (40, 10, 10, 40))], 0.2);
    let triggers = evaluate_rules(&window, &label, &[rule], &FlagOptions::default()).map_err(|e| e.to_string())?;
    let flagged: Vec<f64> = triggers.iter().map(|(t, _)| t.observed).collect();
    ensure!(flagged == [0.84, 0.83], "rule flagged {flagged:?}");
    Ok("0.84 and 0.83 flagged, 0.85 and 0.88 not".into())
}

// 4 ---------------------------------------------------------------------------

fn dataset_95_5(seed: u64) -> Vec<DatasetRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1000)
        .map(|i| {
            let class = if i < 950 { "major" } else { "minor" };
            let shift = if i < 950 { 0.0 } else { 3.0 };
            DatasetRow {
                row_id: format!("r{i}"),
                values: vec![rng.random::<f64>() + shift, rng.random::<f64>() * 2.0 - shift],
                subgroup: BTreeMap::from([(ATTR.to_string(), class.to_string())]),
                task_label: Some(Label::from(i % 3 == 0)),
                synthetic: false,
                source_row: None,
            }
        })
        .collect()
}

fn segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ap: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    let closest: Vec<f64> = a.iter().zip(&ab).map(|(x, d)| x + t * d).collect();
    euclidean(p, &closest)
}

fn smote_balancing() -> Outcome {
    let rows = dataset_95_5(11);
    let counts = BTreeMap::from([("major".to_string(), 950), ("minor".to_string(), 50)]);
    let minority: Vec<&DatasetRow> = rows.iter().filter(|r| r.subgroup[ATTR] == "minor").collect();
    let by_id: BTreeMap<&str, &DatasetRow> = rows.iter().map(|r| (r.row_id.as_str(), r)).collect();
    let mut details = Vec::new();
    for (match_majority, expected) in [(false, 500), (true, 950)] {
        let plan = ResamplePlan::balanced(Strategy::Smote, &counts, match_majority, 5, 3);
        let out = rebalance_by_subgroup(&rows, ATTR, &plan).map_err(|e| e.to_string())?;
        let mut trainable: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &out.rows {
            *trainable.entry(r.subgroup[ATTR].as_str()).or_default() += 1;
        }
        ensure!(
            trainable.get("major") == Some(&expected) && trainable.get("minor") == Some(&expected),
            "match_majority={match_majority}: counts {trainable:?}"
        );
        let synthetic: Vec<&DatasetRow> = out.rows.iter().filter(|r| r.synthetic).collect();
        ensure!(synthetic.len() == expected - 50, "{} synthetic rows", synthetic.len());
        for s in &synthetic {
            let source = by_id[s.source_row.as_deref().ok_or("synthetic row without source")?];
            let on_segment = minority
                .iter()
                .any(|m| segment_distance(&s.values, &source.values, &m.values) < 1e-9);
            ensure!(on_segment, "{} is off every minority segment", s.row_id);
        }
        details.push(format!("{expected}/{expected}"));
    }
    Ok(format!("{} with all synthetics on segments", details.join(" and ")))
}

// 5 ---------------------------------------------------------------------------

/// Cost of keeping `subset`: summed mean distance to the k nearest minority points.
fn near_miss_cost(point: &[f64], minority: &[FeatureVector], k: usize) -> f64 {
    let mut d: Vec<f64> = minority.iter().map(|m| euclidean(point, &m.values)).collect();
    d.sort_by(f64::total_cmp);
    d[..k].iter().sum::<f64>() / k as f64
}

fn near_miss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0;
    let mut subsets = 0u64;
    for _ in 0..400 {
        let n = rng.random_range(1..=8usize);
        let m = rng.random_range(1..=4usize);
        let dim = rng.random_range(1..=3usize);
        let point = |rng: &mut ChaCha8Rng, tag: &str| {
            FeatureVector::new((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect(), tag)
        };
        let majority: Vec<_> = (0..n).map(|_| point(&mut rng, "maj")).collect();
        let minority: Vec<_> = (0..m).map(|_| point(&mut rng, "min")).collect();
        let k = rng.random_range(1..=m);
        for target in 0..=n {
            let mut got = near_miss(&majority, &minority, target, k).map_err(|e| e.to_string())?;
            got.sort_unstable();
            // exhaustive: every subset of the right size, smallest total cost
            let cost: Vec<f64> = majority.iter().map(|p| near_miss_cost(&p.values, &minority, k)).collect();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != target {
                    continue;
                }
                subsets += 1;
                let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let total: f64 = idx.iter().map(|&i| cost[i]).sum();
                if best.as_ref().is_none_or(|(b, _)| total < *b - 1e-12) {
                    best = Some((total, idx));
                }
            }
            let (best_cost, best_idx) = best.expect("at least the empty subset");
            let got_cost: f64 = got.iter().map(|&i| cost[i]).sum();
            ensure!(got.len() == target, "kept {} of target {target}", got.len());
            ensure!(
                got == best_idx || close(got_cost, best_cost, 1e-9),
                "n={n} m={m} k={k} target={target}: got {got:?} ({got_cost}), oracle {best_idx:?} ({best_cost})"
            );
            cases += 1;
        }
    }
    Ok(format!("{cases} cases, {subsets} subsets enumerated"))
}

// 6 ---------------------------------------------------------------------------

fn canary_safety() -> Outcome {
    let mut tay_max: f64 = 0.0;
    for seed in 0..20 {
        let r = run_named("tay", Some(seed)).map_err(|e| e.to_string())?;
        let c = r.canary.ok_or("tay has no canary outcome")?;
        ensure!(c.status == RolloutStatus::RolledBack, "tay seed {seed} ended {:?}", c.status);
        ensure!(c.max_fraction < 0.5, "tay seed {seed} reached fraction {}", c.max_fraction);
        tay_max = tay_max.max(c.max_fraction);
    }
    let mut completed = 0;
    for seed in 0..20 {
        let r = run_named("null", Some(seed)).map_err(|e| e.to_string())?;
        let c = r.canary.ok_or("null has no canary outcome")?;
        if c.status == RolloutStatus::Completed && c.max_fraction == 1.0 {
            completed += 1;
        }
    }
    ensure!(completed >= 19, "null completed {completed}/20");
    Ok(format!("tay rolled back 20/20 (max fraction {tay_max}), null completed {completed}/20"))
}

// 7 ---------------------------------------------------------------------------

fn blue_green() -> Outcome {
    let (mut blue_gap, mut green_gap) = (0.0, 0.0);
    for seed in 0..20 {
        let r = run_named("blue_green", Some(seed)).map_err(|e| e.to_string())?;
        let bg = r.blue_green.ok_or("no comparison")?;
        ensure!(bg.decision == Decision::KeepBlue, "seed {seed}: {:?} ({:?})", bg.decision, bg.notes);
        let eo = &bg.parity[&ParityMetric::EqualizedOdds];
        blue_gap += eo.blue.ok_or("blue gap undefined")? / 20.0;
        green_gap += eo.green.ok_or("green gap undefined")? / 20.0;
    }
    ensure!(close(blue_gap, 0.05, 0.02) && close(green_gap, 0.30, 0.02), "mean gaps {blue_gap:.3} / {green_gap:.3}");
    Ok(format!("keep champion 20/20, mean equalized-odds gap {blue_gap:.3} vs {green_gap:.3}"))
}

// 8 ---------------------------------------------------------------------------

fn label_band_failure() -> Outcome {
    let mut latest = 0;
    for seed in 0..20 {
        let r = run_named("gender_shades", Some(seed)).map_err(|e| e.to_string())?;
        let rates = |c: &str| r.label.entry("skin_gender", c).and_then(|e| e.baseline_rates.get(RateMetric::ErrorRate));
        ensure!(
            rates("darker_female").is_some_and(|v| close(v, 0.347, 1e-9)) && rates("lighter_male").is_some_and(|v| close(v, 0.08, 1e-9)),
            "label error rates {:?} / {:?}",
            rates("darker_female"),
            rates("lighter_male")
        );
        let d = r.drift.ok_or("no drift outcome")?;
        let first = d.first_concept_alert_window.ok_or(format!("seed {seed}: no band failure"))?;
        ensure!(first < 2, "seed {seed}: first failure in window {first}");
        latest = latest.max(first);
        let failing: Vec<&str> = d
            .report
            .concept
            .iter()
            .filter(|e| e.status == DriftStatus::Alert)
            .map(|e| e.subgroup.as_str())
            .collect();
        ensure!(failing.iter().all(|s| *s == "darker_female") && !failing.is_empty(), "seed {seed}: failing {failing:?}");
    }
    Ok(format!("weaker subgroup fails its band by window {} in 20/20 seeds", latest + 1))
}

// 9 ---------------------------------------------------------------------------

struct Checkpoint {
    ops: usize,
    snapshot: ServiceSnapshot,
}

/// Drives a realistic sequence of writes and records the state after each call.
fn crash_workload(dir: &Path) -> Result<(Vec<WriteOp>, Vec<Checkpoint>), String> {
    let trace = WriteTrace::default();
    let data = DataDir::new(dir).with_trace(trace.clone());
    let config = ServiceConfig {
        data_dir: dir.to_path_buf(),
        min_count: 10,
        ..ServiceConfig::default()
    };
    let mut s = Service::open(config, data).map_err(|e| e.to_string())?;
    let mut checkpoints = Vec::new();
    let mut mark = |s: &Service| {
        checkpoints.push(Checkpoint {
            ops: trace.lock().unwrap().len(),
            snapshot: s.snapshot(),
        })
    };
    const FAIR: Counts = (15, 5, 5, 15);
    let stages = vec![
        Stage { fraction: 0.25, min_duration_secs: 0, min_events: 40 },
        Stage { fraction: 1.0, min_duration_secs: 0, min_events: 40 },
    ];

    e(s.put_label(MV, &label_json(&label_for(&[("a", FAIR), ("b", FAIR)], 0.2))))?;
    mark(&s);
    let stable = Batch::new(&[("a", FAIR), ("b", FAIR)]);
    e(s.ingest_events(&stable.events()))?;
    mark(&s);
    e(s.ingest_outcomes(&stable.outcomes()))?;
    mark(&s);
    for (id, offset) in [("r1", 0), ("r2", 100_000)] {
        e(s.create_rollout(RolloutRequest {
            rollout_id: id.into(),
            model_version: MV.into(),
            stages: Some(stages.clone()),
            gates: None,
            cohort_attributes: None,
            at: Some(t0() + Duration::seconds(offset)),
        }))?;
        mark(&s);
    }
    // r1 completes, r2 rolls back, r3 stays running
    for (stage, offset) in [(0, 10), (1, 2_000)] {
        let batch = Batch::new(&[("a", FAIR), ("b", FAIR)]).canary("r1", &format!("r1s{stage}-"), t0() + Duration::seconds(offset));
        e(s.ingest_events(&batch.events()))?;
        e(s.ingest_outcomes(&batch.outcomes()))?;
        mark(&s);
        e(s.advance_rollout("r1", AdvanceRequest { at: Some(t0() + Duration::seconds(offset + 1_000)) }))?;
        mark(&s);
    }
    let unfair = Batch::new(&[("a", FAIR), ("b", (5, 5, 15, 15))]).canary("r2", "r2s0-", t0() + Duration::seconds(100_010));
    e(s.ingest_events(&unfair.events()))?;
    e(s.ingest_outcomes(&unfair.outcomes()))?;
    mark(&s);
    e(s.advance_rollout("r2", AdvanceRequest { at: Some(t0() + Duration::seconds(101_000)) }))?;
    mark(&s);

    let mut rule = FlagRule::f1("f1", ATTR);
    rule.baseline = Some(0.99);
    let items = e(s.flag(FlagRequest {
        model_version: MV.into(),
        window: None,
        rules: Some(vec![rule]),
        min_count: Some(10),
        at: Some(t0()),
    }))?
    .items;
    mark(&s);
    for (item, decision) in items.iter().zip([DecisionKind::Prune, DecisionKind::Nudge]) {
        e(s.decide(
            &item.item_id,
            DecisionRequest {
                corrected_label: (decision == DecisionKind::Nudge).then_some(Label::Positive),
                decision,
                reviewer: "rev".into(),
                at: Some(t0()),
            },
        ))?;
        mark(&s);
    }
    e(s.create_comparison(ComparisonRequest {
        comparison_id: "c1".into(),
        model_version: MV.into(),
        blue: ArmSpec { name: "blue".into(), kind: fairgate_core::rollout::ArmKind::Model, model_version: None, environment: Some(fairgate_core::model::Environment::Stable) },
        green: ArmSpec { name: "green".into(), kind: fairgate_core::rollout::ArmKind::Model, model_version: None, environment: Some(fairgate_core::model::Environment::Canary) },
        kpi: None,
    }))?;
    mark(&s);
    e(s.create_rollout(RolloutRequest {
        rollout_id: "r3".into(),
        model_version: MV.into(),
        stages: Some(stages),
        gates: None,
        cohort_attributes: None,
        at: Some(t0() + Duration::seconds(200_000)),
    }))?;
    mark(&s);
    e(s.abort_rollout("r2", AbortRequest::default())).err().ok_or("abort after rollback accepted")?;
    let late = Batch::new(&[("a", (3, 1, 1, 3))]).canary("r3", "late-", t0() + Duration::seconds(200_010));
    e(s.ingest_events(&late.events()))?;
    mark(&s);

    let ops = trace.lock().unwrap().clone();
    Ok((ops, checkpoints))
}

fn materialize(dir: &Path, ops: &[WriteOp], partial: Option<(&WriteOp, usize)>) {
    use std::io::Write;
    let write = |rel: &Path, bytes: &[u8], append: bool| {
        let abs = dir.join(rel);
        std::fs::create_dir_all(abs.parent().unwrap()).unwrap();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(abs)
            .unwrap();
        f.write_all(bytes).unwrap();
    };
    for op in ops {
        match op {
            WriteOp::Append { path, bytes } => write(path, bytes, true),
            WriteOp::Replace { path, bytes } => write(path, bytes, false),
        }
    }
    match partial {
        Some((WriteOp::Append { path, bytes }, cut)) => write(path, &bytes[..cut], true),
        // an interrupted replace leaves only a partial temp file behind
        Some((WriteOp::Replace { path, bytes }, cut)) => write(&path.with_extension("tmp"), &bytes[..cut], false),
        None => {}
    }
}

fn restore(dir: &Path) -> Result<Service, String> {
    let config = ServiceConfig {
        data_dir: dir.to_path_buf(),
        min_count: 10,
        ..ServiceConfig::default()
    };
    Service::open(config, DataDir::new(dir)).map_err(|e| e.to_string())
}

fn crash_consistency() -> Outcome {
    let live = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ops, checkpoints) = crash_workload(live.path())?;
    let final_state = &checkpoints.last().unwrap().snapshot;
    ensure!(&restore(live.path())?.snapshot() == final_state, "clean restart differs from live state");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut partial_lines = 0;
    for kill in 0..100 {
        let k = rng.random_range(0..ops.len());
        let op = &ops[k];
        let len = match op {
            WriteOp::Append { bytes, .. } | WriteOp::Replace { bytes, .. } => bytes.len(),
        };
        let cut = rng.random_range(0..len);

        let crashed = tempfile::tempdir().map_err(|e| e.to_string())?;
        materialize(crashed.path(), &ops[..k], Some((op, cut)));
        let clean = tempfile::tempdir().map_err(|e| e.to_string())?;
        materialize(clean.path(), &ops[..k], None);

        let restored = restore(crashed.path()).map_err(|e| format!("kill {kill} (op {k}, byte {cut}): {e}"))?;
        let recovered = restored.restore_report().recovered.len();
        ensure!(recovered <= 1, "kill {kill}: {recovered} torn lines");
        partial_lines += recovered;
        let state = restored.snapshot();
        ensure!(state == restore(clean.path())?.snapshot(), "kill {kill}: more than the partial line was lost");

        // everything durable before the kill survives unchanged
        let before = checkpoints.iter().rev().find(|c| c.ops <= k);
        if let Some(c) = before {
            if c.ops == k {
                ensure!(state == c.snapshot, "kill {kill}: state differs from the last completed call");
            }
            for item in c.snapshot.queue.items().filter(|i| i.status != ItemStatus::Pending) {
                let now = state.queue.get(&item.item_id);
                ensure!(now == Some(item), "kill {kill}: decided item {} changed", item.item_id);
            }
            for (id, r) in c.snapshot.rollouts.iter().filter(|(_, r)| r.status.is_terminal()) {
                ensure!(state.rollouts.get(id) == Some(r), "kill {kill}: terminal rollout {id} changed");
            }
        }
        // and the restored directory accepts new writes
        let mut restored = restored;
        let probe = Batch::new(&[("a", (1, 0, 0, 0))]).canary("probe", &format!("probe{kill}-"), t0());
        restored.ingest_events(&probe.events()).map_err(|e| e.to_string())?;
        drop(restored);
        restore(crashed.path()).map_err(|e| format!("kill {kill}: reopen after write: {e}"))?;
    }
    Ok(format!("100 kill points over {} writes, {partial_lines} partial lines dropped, nothing else lost", ops.len()))
}

// 10 --------------------------------------------------------------------------

struct Case {
    name: &'static str,
    cli: Vec<String>,
    method: &'static str,
    uri: String,
    body: Option<String>,
    /// CLI reads label/events/outcomes files; HTTP gets the same via ingestion.
    from_files: bool,
}

fn populate_dir(dir: &Path) -> Result<(), String> {
    let config = ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    };
    let mut s = Service::open(config, DataDir::new(dir)).map_err(|e| e.to_string())?;
    let stable = Batch::new(&[("a", PARITY_A), ("b", PARITY_B)]);
    e(s.put_label(MV, &label_json(&parity_label())))?;
    e(s.ingest_events(&stable.events()))?;
    e(s.ingest_outcomes(&stable.outcomes()))?;
    e(s.create_rollout(RolloutRequest {
        rollout_id: "r1".into(),
        model_version: MV.into(),
        stages: Some(vec![Stage { fraction: 0.5, min_duration_secs: 0, min_events: 100 }, Stage { fraction: 1.0, min_duration_secs: 0, min_events: 100 }]),
        gates: None,
        cohort_attributes: None,
        at: Some(t0()),
    }))?;
    let canary = Batch::new(&[("a", PARITY_A), ("b", PARITY_A)]).canary("r1", "c-", t0() + Duration::seconds(10));
    e(s.ingest_events(&canary.events()))?;
    e(s.ingest_outcomes(&canary.outcomes()))?;
    let mut rule = FlagRule::f1("f1", ATTR);
    rule.baseline = Some(0.99);
    e(s.flag(FlagRequest {
        model_version: MV.into(),
        window: None,
        rules: Some(vec![rule]),
        min_count: None,
        at: Some(t0()),
    }))?;
    Ok(())
}

fn cli_http_equivalence() -> Outcome {
    let files = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| files.path().join(name).display().to_string();
    let stable = Batch::new(&[("a", PARITY_A), ("b", PARITY_B)]);
    std::fs::write(path("label.json"), label_json(&parity_label())).unwrap();
    std::fs::write(path("events.jsonl"), stable.events()).unwrap();
    std::fs::write(path("outcomes.jsonl"), stable.outcomes()).unwrap();
    let rows: Vec<Value> = dataset_95_5(4)
        .into_iter()
        .step_by(10)
        .map(|r| serde_json::to_value(r).unwrap())
        .collect();
    let rebalance = json!({"rows": rows, "attribute": ATTR, "strategy": "near_miss", "k": 3}).to_string();
    std::fs::write(path("rebalance.json"), &rebalance).unwrap();
    let at = (t0() + Duration::seconds(5_000)).to_rfc3339();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let with_files = |cmd: &str| {
        s(&[cmd, "--model-version", MV, "--label", &path("label.json"), "--events", &path("events.jsonl"), "--outcomes", &path("outcomes.jsonl")])
    };
    let cases = vec![
        Case { name: "parity", cli: with_files("parity"), method: "GET", uri: "/v1/parity?model_version=m1".into(), body: None, from_files: true },
        Case { name: "metrics", cli: with_files("metrics"), method: "GET", uri: "/v1/metrics/stratified?model_version=m1".into(), body: None, from_files: true },
        Case { name: "drift", cli: with_files("drift"), method: "GET", uri: "/v1/drift?model_version=m1".into(), body: None, from_files: true },
        Case { name: "rollout status", cli: s(&["rollout", "status", "r1"]), method: "GET", uri: "/v1/rollouts/r1".into(), body: None, from_files: false },
        Case { name: "rollout list", cli: s(&["rollout", "list"]), method: "GET", uri: "/v1/rollouts".into(), body: None, from_files: false },
        Case {
            name: "rollout advance",
            cli: s(&["rollout", "advance", "r1", "--at", &at]),
            method: "POST",
            uri: "/v1/rollouts/r1/advance".into(),
            body: Some(json!({"at": at}).to_string()),
            from_files: false,
        },
        Case {
            name: "rollout abort",
            cli: s(&["rollout", "abort", "r1", "--reason", "manual", "--at", &at]),
            method: "POST",
            uri: "/v1/rollouts/r1/abort".into(),
            body: Some(json!({"reason": "manual", "at": at}).to_string()),
            from_files: false,
        },
        Case { name: "review queue", cli: s(&["review", "queue", "--status", "pending"]), method: "GET", uri: "/v1/review/queue?status=pending".into(), body: None, from_files: false },
        Case {
            name: "review decide",
            cli: s(&["review", "decide", "item-000001", "--decision", "nudge", "--corrected-label", "1", "--reviewer", "rev", "--at", &at]),
            method: "POST",
            uri: "/v1/review/item-000001/decision".into(),
            body: Some(json!({"decision": "nudge", "corrected_label": 1, "reviewer": "rev", "at": at}).to_string()),
            from_files: false,
        },
        Case {
            name: "simulate",
            cli: s(&["simulate", "--scenario", "gender_shades", "--seed", "5"]),
            method: "POST",
            uri: "/v1/simulate".into(),
            body: Some(r#"{"scenario":"gender_shades","seed":5}"#.into()),
            from_files: false,
        },
        Case { name: "rebalance", cli: s(&["rebalance", &path("rebalance.json")]), method: "POST", uri: "/v1/rebalance".into(), body: Some(rebalance.clone()), from_files: false },
        Case { name: "error", cli: s(&["rollout", "status", "ghost"]), method: "GET", uri: "/v1/rollouts/ghost".into(), body: None, from_files: false },
    ];

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let mut matched = 0;
    for case in &cases {
        // each side gets its own copy of the same data directory
        let cli_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let http_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        populate_dir(cli_dir.path())?;
        populate_dir(http_dir.path())?;

        let mut args = vec!["fairgate".to_string(), "--json".into(), "--data-dir".into(), cli_dir.path().display().to_string()];
        args.extend(case.cli.iter().cloned());
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = fairgate_gateway::cli::run(&args, &mut out, &mut err);
        let cli_text = if code == 0 { out } else { err };
        let cli_json: Value = serde_json::from_slice(&cli_text)
            .map_err(|e| format!("{}: CLI output is not JSON ({e}): {}", case.name, String::from_utf8_lossy(&cli_text)))?;

        let config = ServiceConfig {
            data_dir: http_dir.path().to_path_buf(),
            ..ServiceConfig::default()
        };
        let http_app = if case.from_files {
            let app = ephemeral_app();
            runtime.block_on(async {
                send(&app, "PUT", "/v1/labels/m1", Some(&label_json(&parity_label()))).await;
                send(&app, "POST", "/v1/events", Some(&stable.events())).await;
                send(&app, "POST", "/v1/outcomes", Some(&stable.outcomes())).await;
            });
            app
        } else {
            app(Service::open(config, DataDir::new(http_dir.path())).map_err(|e| e.to_string())?)
        };
        let reply = runtime.block_on(send(&http_app, case.method, &case.uri, case.body.as_deref()));
        let http_json = reply.json();
        ensure!((code == 0) == reply.status.is_success(), "{}: exit {code} vs status {}", case.name, reply.status);
        ensure!(cli_json == http_json, "{}: CLI {cli_json} != HTTP {http_json}", case.name);
        matched += 1;
    }
    Ok(format!("{matched}/{} fixtures structurally equal", cases.len()))
}
