//! `intercept-sim`: generate traces, fit cost models, run simulations and
//! rate sweeps, and summarize their outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use intercept_core::cost_model::{fit_profile, load_profile_points};
use intercept_core::experiment::{read_sweep_csv, run_sweep, write_sweep_csv, SweepRow, Variant};
use intercept_core::metrics::Summary;
use intercept_core::workload::{
    generate_trace, load_trace, save_trace, trace_stats, ClassStats, GenSpec, InterceptionClass,
};
use intercept_core::{run, ClassName, CostModel, EstimatorMode, PolicyKind, Request, SimConfig};
use serde::{Deserialize, Serialize};

const POLICY_NAMES: [&str; 5] = ["vanilla-discard", "improved-discard", "preserve", "swap", "infercept"];
const ESTIMATOR_NAMES: [&str; 3] = ["oracle", "profiled", "dynamic"];

#[derive(Parser)]
#[command(name = "intercept-sim", version, about = "Simulate LLM serving with intercepted requests")]
struct Cli {
    /// JSON file with run settings; flags given on the command line win
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Scheduling policy
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(POLICY_NAMES))]
    policy: Option<String>,

    /// How paused requests' remaining interception time is estimated
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(ESTIMATOR_NAMES))]
    duration_estimator: Option<String>,

    /// Seed for trace generation
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trace and a sidecar of per-class statistics
    Gen(GenArgs),
    /// Fit the latency curve of a cost model to profiling points
    Profile(ProfileArgs),
    /// Simulate one policy on one trace
    Run(RunArgs),
    /// Simulate several policies across several arrival rates
    Sweep(SweepArgs),
    /// Print or merge sweep CSVs and summary JSONs
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct WorkloadArgs {
    /// Replay this trace instead of generating one
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Requests to generate
    #[arg(long)]
    requests: Option<usize>,

    /// Poisson arrival rate of the generated trace, requests/s
    #[arg(long)]
    rate: Option<f64>,

    /// Comma-separated interception classes for a uniform mixture
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Cost-model JSON; the built-in synthetic model if omitted
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,

    /// Trace file to write
    #[arg(short, long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// CSV of `batch_tokens,seconds` measurements
    points: PathBuf,

    /// Model whose non-latency parameters are kept
    #[command(flatten)]
    model: ModelArgs,

    /// Fitted model JSON to write
    #[arg(short, long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,

    #[command(flatten)]
    model: ModelArgs,

    /// Directory for requests.csv and summary.json
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Write one JSON line per iteration
    #[arg(long, value_name = "PATH")]
    event_log: Option<PathBuf>,

    /// Write the per-interception decision log as CSV
    #[arg(long, value_name = "PATH")]
    decisions: Option<PathBuf>,

    /// Snapshot the KV ledger every N iterations into ledger.jsonl
    #[arg(long, value_name = "N")]
    dump_ledger_every: Option<u64>,

    /// Stop after this much simulated time, seconds
    #[arg(long)]
    max_sim_seconds: Option<f64>,

    /// Verify queue and memory invariants after every iteration
    #[arg(long)]
    check_invariants: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    workload: WorkloadArgs,

    #[command(flatten)]
    model: ModelArgs,

    /// Comma-separated arrival rates, requests/s
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,

    /// Comma-separated policies; all five if omitted
    #[arg(long, value_delimiter = ',', value_parser = PossibleValuesParser::new(POLICY_NAMES))]
    policies: Option<Vec<String>>,

    /// Arrival rate the replayed trace was recorded at; estimated if omitted
    #[arg(long)]
    base_rate: Option<f64>,

    /// Sweep CSV to write
    #[arg(short, long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Worker threads
    #[arg(long, env = "INTERCEPT_SIM_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep CSVs and/or summary JSONs
    #[arg(required = true)]
    inputs: Vec<PathBuf>,

    /// Merge all sweep rows into this CSV
    #[arg(short, long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// Settings accepted through `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    trace: Option<PathBuf>,
    gen: Option<GenSpec>,
    requests: Option<usize>,
    rate: Option<f64>,
    classes: Option<Vec<ClassName>>,
    model: Option<PathBuf>,
    cost_model: Option<CostModel>,
    policy: Option<PolicyKind>,
    estimator: Option<EstimatorMode>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    rates: Option<Vec<f64>>,
    policies: Option<Vec<PolicyKind>>,
    max_sim_seconds: Option<f64>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
enum TraceSource {
    File(PathBuf),
    Generated(GenSpec),
}

/// Resolved settings shared by `run` and `sweep`.
struct Settings {
    file: RunConfig,
    policy: Option<PolicyKind>,
    estimator: Option<EstimatorMode>,
    seed: Option<u64>,
}

impl Settings {
    fn seed(&self) -> u64 {
        self.seed.or(self.file.seed).unwrap_or(0)
    }

    fn policy(&self) -> PolicyKind {
        self.policy.or(self.file.policy).unwrap_or(PolicyKind::InferCept)
    }

    fn estimator(&self) -> EstimatorMode {
        self.estimator.or(self.file.estimator).unwrap_or_default()
    }

    fn source(&self, w: &WorkloadArgs) -> Result<TraceSource> {
        let trace = w.trace.clone().or_else(|| self.file.trace.clone());
        let gen_flags = w.requests.is_some() || w.rate.is_some() || w.classes.is_some();
        match trace {
            Some(path) => {
                if gen_flags || self.file.gen.is_some() {
                    bail!("give either a trace file or generation settings, not both");
                }
                Ok(TraceSource::File(path))
            }
            None => {
                let mut spec = match &self.file.gen {
                    Some(spec) => spec.clone(),
                    None => GenSpec::mixed(2000, 1.0, 0),
                };
                if self.file.gen.is_none() || self.seed.is_some() {
                    spec.seed = self.seed();
                }
                if let Some(n) = w.requests.or(self.file.requests) {
                    spec.request_count = n;
                }
                if let Some(r) = w.rate.or(self.file.rate) {
                    spec.arrival_rate = r;
                }
                let classes = match &w.classes {
                    Some(names) => Some(
                        names
                            .iter()
                            .map(|n| n.parse::<ClassName>())
                            .collect::<intercept_core::Result<Vec<_>>>()?,
                    ),
                    None => self.file.classes.clone(),
                };
                if let Some(classes) = classes {
                    spec = GenSpec::uniform(&classes, spec.request_count, spec.arrival_rate, spec.seed);
                }
                Ok(TraceSource::Generated(spec))
            }
        }
    }

    fn model(&self, m: &ModelArgs) -> Result<CostModel> {
        let path = m.model.clone().or_else(|| self.file.model.clone());
        match (path, &self.file.cost_model) {
            (Some(_), Some(_)) if m.model.is_none() => {
                bail!("config gives both a model path and inline cost_model")
            }
            (Some(p), _) => CostModel::load(&p).with_context(|| format!("loading model {}", p.display())),
            (None, Some(inline)) => {
                inline.validate()?;
                Ok(inline.clone())
            }
            (None, None) => Ok(CostModel::synthetic()),
        }
    }
}

fn load_source(source: &TraceSource) -> Result<Vec<Request>> {
    match source {
        TraceSource::File(p) => load_trace(p).context("loading trace"),
        TraceSource::Generated(spec) => Ok(generate_trace(spec)?),
    }
}

fn stats_path(trace: &Path) -> PathBuf {
    trace.with_extension("stats.json")
}

#[derive(Serialize)]
struct StatsSidecar<'a> {
    empirical: &'a [ClassStats],
    reference: Vec<InterceptionClass>,
}

fn cmd_gen(ctx: &Settings, args: &GenArgs) -> Result<()> {
    let spec = match ctx.source(&args.workload)? {
        TraceSource::Generated(spec) => spec,
        TraceSource::File(_) => bail!("gen does not take --trace"),
    };
    let trace = generate_trace(&spec)?;
    save_trace(&args.out, &trace).with_context(|| format!("writing {}", args.out.display()))?;
    let stats = trace_stats(&trace);
    let reference = ClassName::ALL
        .into_iter()
        .filter(|c| stats.iter().any(|s| s.class == c.as_str()))
        .map(InterceptionClass::builtin)
        .collect();
    let sidecar = stats_path(&args.out);
    let text = serde_json::to_string_pretty(&StatsSidecar {
        empirical: &stats,
        reference,
    })?;
    fs::write(&sidecar, text + "\n").with_context(|| format!("writing {}", sidecar.display()))?;
    log::info!("wrote {} requests to {}", trace.len(), args.out.display());
    Ok(())
}

fn cmd_profile(ctx: &Settings, args: &ProfileArgs) -> Result<()> {
    let points = load_profile_points(&args.points)
        .with_context(|| format!("reading profile points {}", args.points.display()))?;
    let fit = fit_profile(&points)?;
    let model = ctx.model(&args.model)?.with_fit(&fit);
    model.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("saturation point: {} tokens", fit.saturation_point);
    println!("t0: {:.6} s", fit.t0);
    println!("slope below: {:.3e} s/token", fit.slope_below);
    println!("slope above: {:.3e} s/token", fit.slope_above);
    println!("residual: {:.3e}", fit.residual);
    Ok(())
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    trace: &'a TraceSource,
    model: &'a CostModel,
    policy: PolicyKind,
    sim: &'a SimConfig,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config: ConfigEcho<'a>,
    summary: Summary,
    interceptions: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_run(ctx: &Settings, args: &RunArgs) -> Result<()> {
    let source = ctx.source(&args.workload)?;
    let trace = load_source(&source)?;
    let model = ctx.model(&args.model)?;
    let policy = ctx.policy();
    let mut sim = SimConfig::for_policy(policy);
    sim.estimator = ctx.estimator();
    sim.record_iterations = args.event_log.is_some();
    sim.check_invariants = args.check_invariants;
    sim.ledger_dump_every = args.dump_ledger_every;
    if let Some(s) = args.max_sim_seconds.or(ctx.file.max_sim_seconds) {
        sim.max_sim_seconds = s;
    }

    let out = run(&trace, &model, &sim)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| ctx.file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let requests = out_dir.join("requests.csv");
    out.metrics
        .save_requests_csv(&requests)
        .with_context(|| format!("writing {}", requests.display()))?;
    let summary = out.metrics.summary();
    let file = SummaryFile {
        config: ConfigEcho {
            trace: &source,
            model: &model,
            policy,
            sim: &sim,
        },
        summary: summary.clone(),
        interceptions: out.decisions.len(),
    };
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;

    if let Some(path) = &args.event_log {
        write_jsonl(path, &out.iterations)?;
    }
    if !out.ledger_dumps.is_empty() {
        write_jsonl(&out_dir.join("ledger.jsonl"), &out.ledger_dumps)?;
    }
    if let Some(path) = &args.decisions {
        let mut w = csv::Writer::from_writer(create(path)?);
        for d in &out.decisions {
            w.serialize(d)?;
        }
        w.flush()?;
    }

    print_summary(policy.as_str(), &summary);
    Ok(())
}

fn print_summary(label: &str, s: &Summary) {
    let opt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("policy: {label}");
    println!("requests: {} completed, {} incomplete", s.completed, s.incomplete);
    println!("normalized latency: {} s/token", opt(s.normalized_latency));
    println!("throughput: {:.4} req/s", s.throughput);
    println!("ttft: {} s", opt(s.ttft));
    println!(
        "waste: {:.3}% ({:.3} GB*min), recompute fraction {:.3}",
        s.waste.total_pct, s.waste.total_gb_min, s.waste.recompute_fraction
    );
}

/// Requests per second implied by a trace's span.
fn estimate_rate(trace: &[Request]) -> Result<f64> {
    let last = trace.iter().map(|r| r.arrival).fold(0.0, f64::max);
    if trace.is_empty() || last <= 0.0 {
        bail!("cannot infer the arrival rate of this trace; pass --base-rate");
    }
    Ok(trace.len() as f64 / last)
}

fn cmd_sweep(ctx: &Settings, args: &SweepArgs) -> Result<()> {
    let source = ctx.source(&args.workload)?;
    let trace = load_source(&source)?;
    let base_rate = match (&source, args.base_rate) {
        (_, Some(r)) => r,
        (TraceSource::Generated(spec), None) => spec.arrival_rate,
        (TraceSource::File(_), None) => estimate_rate(&trace)?,
    };
    let model = ctx.model(&args.model)?;
    let rates = args
        .rates
        .clone()
        .or_else(|| ctx.file.rates.clone())
        .unwrap_or_else(|| vec![0.5, 1.0, 2.0, 4.0, 8.0]);
    let policies: Vec<PolicyKind> = match &args.policies {
        Some(names) => names.iter().map(|n| n.parse().map_err(anyhow::Error::msg)).collect::<Result<_>>()?,
        None => ctx.file.policies.clone().unwrap_or_else(|| PolicyKind::ALL.to_vec()),
    };
    let variants: Vec<Variant> = policies
        .iter()
        .map(|&p| {
            let mut config = SimConfig::for_policy(p);
            config.estimator = ctx.estimator();
            if let Some(s) = ctx.file.max_sim_seconds {
                config.max_sim_seconds = s;
            }
            Variant {
                label: p.as_str().to_string(),
                config,
            }
        })
        .collect();

    let cells = run_sweep(&trace, base_rate, &rates, &variants, &model, args.threads)?;
    let rows: Vec<SweepRow> = cells.iter().map(SweepRow::from).collect();
    check_monotone(&rows);

    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_sweep_csv(&mut w, &cells)?;
            w.flush()?;
        }
        None => write_sweep_csv(std::io::stdout().lock(), &cells)?,
    }
    Ok(())
}

fn check_monotone(rows: &[SweepRow]) {
    let mut by_policy: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        by_policy.entry(&r.policy).or_default().push(r);
    }
    for (policy, mut pts) in by_policy {
        pts.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        for w in pts.windows(2) {
            if w[1].norm_latency < w[0].norm_latency {
                log::warn!(
                    "{policy}: normalized latency drops from {:.4} at rate {} to {:.4} at rate {}",
                    w[0].norm_latency,
                    w[0].rate,
                    w[1].norm_latency,
                    w[1].rate
                );
            }
        }
    }
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let summary: Summary = serde_json::from_value(v["summary"].clone())
                .with_context(|| format!("{} is not a summary file", path.display()))?;
            let label = v["config"]["policy"].as_str().unwrap_or("?");
            println!("== {}", path.display());
            print_summary(label, &summary);
        } else {
            rows.extend(read_sweep_csv(path).with_context(|| format!("reading {}", path.display()))?);
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.rate.total_cmp(&b.rate)));
    println!(
        "{:<18} {:>8} {:>14} {:>12} {:>10} {:>10}",
        "policy", "rate", "norm_latency", "throughput", "ttft", "waste_pct"
    );
    for r in &rows {
        println!(
            "{:<18} {:>8} {:>14.5} {:>12.4} {:>10.4} {:>10.3}",
            r.policy, r.rate, r.norm_latency, r.throughput, r.ttft, r.waste_pct
        );
    }
    if let Some(path) = &args.out {
        let mut w = csv::Writer::from_writer(create(path)?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Settings {
        file,
        policy: cli.policy.as_deref().map(str::parse).transpose().map_err(anyhow::Error::msg)?,
        estimator: cli
            .duration_estimator
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(anyhow::Error::msg)?,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Profile(a) => cmd_profile(&ctx, a),
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
