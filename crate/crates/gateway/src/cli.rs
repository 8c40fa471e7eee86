//! Command-line interface. Every command goes through [`Service`], so
//! `--json` output is byte-for-byte the body the HTTP API would return.
//!
//! Exit codes: 0 success, 1 domain or I/O error, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use fairgate_core::hitl::{DecisionKind, ExportFilter, ItemStatus};
use fairgate_core::model::Label;
use fairgate_core::simulator::{builtin, BUILTIN_SCENARIOS};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ServiceConfig;
use crate::error::{ApiError, GatewayError};
use crate::persist::DataDir;
use crate::service::{self, Service};

#[derive(Debug, Parser)]
#[command(name = "fairgate", version, about = "Post-deployment fairness gatekeeper")]
pub struct Cli {
    /// Print JSON instead of a human summary.
    #[arg(long, global = true)]
    pub json: bool,
    /// TOML configuration file.
    #[arg(long, global = true, env = "FAIRGATE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the configured data directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Append events, outcomes and a label to the data directory.
    Ingest(IngestArgs),
    /// Per-subgroup confusion matrices and rates.
    Metrics(QueryArgs),
    /// Parity gaps against the reference subgroup.
    Parity(QueryArgs),
    /// Data and concept drift against the label.
    Drift(QueryArgs),
    /// Resample a dataset by subgroup (request JSON from a file or `-`).
    Rebalance {
        request: PathBuf,
    },
    #[command(subcommand)]
    Rollout(RolloutCommand),
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Run a built-in scenario or a scenario script.
    Simulate(SimulateArgs),
    /// Serve the HTTP API.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub model_version: String,
    #[arg(long)]
    pub attribute: Option<String>,
    /// Tumbling-window index; latest when omitted.
    #[arg(long)]
    pub window: Option<usize>,
    /// Query these files in memory instead of the data directory.
    #[command(flatten)]
    pub files: IngestArgs,
}

#[derive(Debug, Subcommand)]
pub enum RolloutCommand {
    /// Create and start a rollout (request JSON from a file or `-`).
    Create { request: PathBuf },
    Status { id: String },
    List,
    Advance {
        id: String,
        #[arg(long)]
        at: Option<DateTime<Utc>>,
    },
    Abort {
        id: String,
        #[arg(long, default_value = "")]
        reason: String,
        #[arg(long)]
        at: Option<DateTime<Utc>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    Queue {
        #[arg(long, value_parser = parse_json_enum::<ItemStatus>)]
        status: Option<ItemStatus>,
    },
    /// Evaluate flag rules (request JSON from a file or `-`).
    Flag { request: PathBuf },
    Decide {
        item_id: String,
        #[arg(long, value_parser = parse_json_enum::<DecisionKind>)]
        decision: DecisionKind,
        #[arg(long)]
        reviewer: String,
        /// 0 or 1; required for `nudge`.
        #[arg(long)]
        corrected_label: Option<u8>,
        #[arg(long)]
        at: Option<DateTime<Utc>>,
    },
    Export {
        #[arg(long)]
        attribute: Option<String>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        item_id: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "script")]
    pub scenario: Option<String>,
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the scenario script instead of running it.
    #[arg(long)]
    pub dump_script: bool,
    /// List the built-in scenarios.
    #[arg(long)]
    pub list: bool,
}

fn parse_json_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let json = cli.json;
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = if json {
                writeln!(err, "{}", serde_json::to_string(&e).unwrap_or_default())
            } else {
                writeln!(err, "error: {e}")
            };
            1
        }
    }
}

type CliResult = Result<(), ApiError>;

fn read_input(path: &Path) -> Result<String, ApiError> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| GatewayError::io("reading stdin", e))?;
        Ok(s)
    } else {
        std::fs::read_to_string(path)
            .map_err(|e| GatewayError::io(format!("reading {}", path.display()), e).into())
    }
}

fn read_request<T: DeserializeOwned>(path: &Path) -> Result<T, ApiError> {
    serde_json::from_str(&read_input(path)?).map_err(|e| ApiError {
        status: 400,
        code: "ParseError".into(),
        message: format!("{}: {e}", path.display()),
    })
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, ApiError> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(d) = &cli.data_dir {
        config.data_dir = d.clone();
    }
    Ok(config)
}

fn open(config: ServiceConfig) -> Result<Service, ApiError> {
    config.prepare_data_dir()?;
    let data = DataDir::new(config.data_dir.clone());
    let service = Service::open(config, data)?;
    for tail in &service.restore_report().recovered {
        tracing::warn!(file = %tail.file.display(), line = tail.line, "dropped torn final line");
    }
    Ok(service)
}

fn load_files(service: &mut Service, files: &IngestArgs) -> Result<service::IngestResponse, ApiError> {
    if let Some(path) = &files.label {
        let document = read_input(path)?;
        let label = fairgate_core::model::NutritionLabel::from_json(&document)?;
        service.put_label(&label.model_version, &document)?;
    }
    let mut total = service::IngestResponse {
        accepted: 0,
        rejected: Vec::new(),
    };
    if let Some(path) = &files.events {
        let r = service.ingest_events(&read_input(path)?)?;
        total.accepted += r.accepted;
        total.rejected.extend(r.rejected);
    }
    if let Some(path) = &files.outcomes {
        let r = service.ingest_outcomes(&read_input(path)?)?;
        total.accepted += r.accepted;
        total.rejected.extend(r.rejected);
    }
    Ok(total)
}

fn emit<T: Serialize>(out: &mut dyn Write, json: bool, value: &T, human: impl FnOnce(&T) -> String) -> CliResult {
    let text = if json {
        serde_json::to_string_pretty(value).map_err(|e| GatewayError::Internal(e.to_string()))?
    } else {
        human(value)
    };
    writeln!(out, "{}", text.trim_end()).map_err(|e| GatewayError::io("writing output", e))?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).unwrap_or_default()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn execute(cli: Cli, out: &mut dyn Write) -> CliResult {
    let json = cli.json;
    match &cli.command {
        Command::Ingest(files) => {
            let mut service = open(load_config(&cli)?)?;
            let r = load_files(&mut service, files)?;
            emit(out, json, &r, human_ingest)
        }
        Command::Metrics(q) | Command::Parity(q) | Command::Drift(q) => {
            let config = load_config(&cli)?;
            let from_files = q.files.events.is_some() || q.files.label.is_some() || q.files.outcomes.is_some();
            let service = if from_files {
                let mut s = Service::ephemeral(config);
                load_files(&mut s, &q.files)?;
                s
            } else {
                open(config)?
            };
            let wq = service::WindowQuery {
                model_version: q.model_version.clone(),
                attribute: q.attribute.clone(),
                window: q.window,
            };
            match &cli.command {
                Command::Metrics(_) => emit(out, json, &service.stratified(&wq)?, human_stratified),
                Command::Parity(_) => emit(out, json, &service.parity(&wq)?, human_parity),
                _ => emit(out, json, &service.drift(&wq)?, human_drift),
            }
        }
        Command::Rebalance { request } => {
            let r = service::rebalance(read_request(request)?)?;
            emit(out, json, &r, pretty)
        }
        Command::Rollout(cmd) => {
            let mut service = open(load_config(&cli)?)?;
            match cmd {
                RolloutCommand::Create { request } => {
                    let v = service.create_rollout(read_request(request)?)?;
                    emit(out, json, &v, human_rollout)
                }
                RolloutCommand::Status { id } => emit(out, json, &service.rollout(id)?, human_rollout),
                RolloutCommand::List => emit(out, json, &service.list_rollouts(), |rs| {
                    let mut s = String::new();
                    for r in rs {
                        let _ = writeln!(
                            s,
                            "{}  {}  {:?}  stage {}  fraction {}",
                            r.rollout_id, r.model_version, r.status, r.current_stage, r.current_fraction
                        );
                    }
                    s
                }),
                RolloutCommand::Advance { id, at } => {
                    let t = service.advance_rollout(id, service::AdvanceRequest { at: *at })?;
                    emit(out, json, &t, human_transition)
                }
                RolloutCommand::Abort { id, reason, at } => {
                    let req = service::AbortRequest {
                        reason: reason.clone(),
                        at: *at,
                    };
                    emit(out, json, &service.abort_rollout(id, req)?, human_transition)
                }
            }
        }
        Command::Review(cmd) => {
            let mut service = open(load_config(&cli)?)?;
            match cmd {
                ReviewCommand::Queue { status } => {
                    let q = service.review_queue(&service::QueueQuery { status: *status });
                    emit(out, json, &q, |q| {
                        let mut s = format!("{} pending\n", q.pending);
                        for i in &q.items {
                            let _ = writeln!(s, "{}  {:?}  {}", i.item_id, i.status, i.trigger.rule_id);
                        }
                        s
                    })
                }
                ReviewCommand::Flag { request } => {
                    let r = service.flag(read_request(request)?)?;
                    emit(out, json, &r, |r| format!("{} item(s) flagged", r.items.len()))
                }
                ReviewCommand::Decide {
                    item_id,
                    decision,
                    reviewer,
                    corrected_label,
                    at,
                } => {
                    let corrected_label = corrected_label
                        .map(Label::try_from)
                        .transpose()
                        .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
                    let req = service::DecisionRequest {
                        decision: *decision,
                        corrected_label,
                        reviewer: reviewer.clone(),
                        at: *at,
                    };
                    let r = service.decide(item_id, req)?;
                    emit(out, json, &r, |r| {
                        format!("{} {:?}; {} retraining row(s)", r.item.item_id, r.item.status, r.rows.len())
                    })
                }
                ReviewCommand::Export {
                    attribute,
                    category,
                    item_id,
                } => {
                    let filter = ExportFilter {
                        attribute: attribute.clone(),
                        category: category.clone(),
                        item_id: item_id.clone(),
                    };
                    write!(out, "{}", service.export(&filter)).map_err(|e| GatewayError::io("writing output", e))?;
                    Ok(())
                }
            }
        }
        Command::Simulate(args) => simulate(args, json, out),
        Command::Serve { listen } => {
            let mut config = load_config(&cli)?;
            if let Some(l) = listen {
                config.listen = l.clone();
            }
            let service = open(config)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| GatewayError::io("starting runtime", e))?;
            runtime.block_on(crate::http::serve(service))?;
            Ok(())
        }
    }
}

fn simulate(args: &SimulateArgs, json: bool, out: &mut dyn Write) -> CliResult {
    if args.list {
        return emit(out, json, &BUILTIN_SCENARIOS, |names| names.join("\n"));
    }
    let script = match (&args.scenario, &args.script) {
        (Some(name), None) => builtin(name)?,
        (None, Some(path)) => read_request(path)?,
        _ => return Err(GatewayError::BadRequest("give --scenario or --script".into()).into()),
    };
    let script = match args.seed {
        Some(seed) => script.with_seed(seed),
        None => script,
    };
    if args.dump_script {
        return emit(out, true, &script, pretty);
    }
    let report = service::simulate(service::SimulateRequest {
        scenario: None,
        script: Some(script),
        seed: None,
    })?;
    emit(out, json, &report, |r| {
        let mut s = format!("scenario {} (seed {})\n", r.name, r.seed);
        for e in &r.expectations {
            let mark = if e.held { "ok  " } else { "FAIL" };
            let _ = writeln!(s, "  {mark} {}: expected {}, observed {}", e.name, e.expected, e.observed);
        }
        let _ = writeln!(s, "{}", if r.all_held { "all expectations held" } else { "expectations violated" });
        s
    })
}

fn human_ingest(r: &service::IngestResponse) -> String {
    let mut s = format!("accepted {}, rejected {}\n", r.accepted, r.rejected.len());
    for l in &r.rejected {
        let _ = writeln!(s, "  line {}: {}: {}", l.line, l.code, l.message);
    }
    s
}

fn human_stratified(r: &service::StratifiedResponse) -> String {
    let mut s = format!("{} by {} (window {})\n", r.model_version, r.attribute, r.window.index);
    for m in &r.strata {
        let c = &m.confusion;
        let _ = writeln!(
            s,
            "  {:<16} n={:<6} tp={} fp={} fn={} tn={}  tpr={} fpr={}",
            m.category,
            m.outcome_bearing,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            fmt_opt(m.rates.tpr),
            fmt_opt(m.rates.fpr)
        );
    }
    s
}

fn human_parity(r: &fairgate_core::metrics::ParityReport) -> String {
    let mut s = format!("{} vs reference {}\n", r.attribute, r.reference_subgroup);
    for p in &r.pairs {
        let _ = writeln!(
            s,
            "  {:<16} dp={} eo={} eodds={}",
            p.other_subgroup,
            fmt_opt(p.demographic_parity_gap.value()),
            fmt_opt(p.equal_opportunity_gap.value()),
            fmt_opt(p.equalized_odds_gap.value())
        );
    }
    s
}

fn human_drift(r: &fairgate_core::drift::DriftReport) -> String {
    let mut s = format!("{} window {}: triage {:?}\n", r.model_version, r.window.index, r.triage_hint);
    for e in &r.data {
        let name = e.subgroup.as_deref().map_or(e.name.clone(), |g| format!("{} [{g}]", e.name));
        let _ = writeln!(s, "  data    {:<28} {} {:?}", name, fmt_opt(e.value), e.status);
    }
    for e in &r.concept {
        let _ = writeln!(
            s,
            "  concept {:<28} {} {:?}",
            format!("{}={} {}", e.attribute, e.subgroup, e.metric),
            fmt_opt(e.observed),
            e.status
        );
    }
    s
}

fn human_rollout(v: &service::RolloutView) -> String {
    format!(
        "{} ({}): {:?}, stage {} at fraction {}",
        v.state.plan.rollout_id, v.state.plan.model_version, v.state.status, v.state.current_stage, v.current_fraction
    )
}

fn human_transition(t: &service::TransitionResponse) -> String {
    let mut s = format!(
        "{:?}: stage {} -> {}, now {:?}",
        t.transition.kind, t.transition.from_stage, t.transition.to_stage, t.transition.status
    );
    if let Some(reason) = &t.transition.reason {
        let _ = write!(s, " ({reason})");
    }
    s
}
