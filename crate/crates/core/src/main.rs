use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::TryRngCore;
use tracing::{info, warn};

use scitrace::agent::{
    self, export_batch, parse_monitoring_args, ExportBatch, HttpTransport, RealTimePacer, RetryPolicy, StopSignal,
};
use scitrace::analysis::{
    self, write_chart, AnalysisError, ChartData, ChartKind, ChartLabels, JobSelector, TimeRange,
};
use scitrace::clock::SystemClock;
use scitrace::collector::{CollectorServer, PipelineConfig, QueryClient};
use scitrace::env::ProcessEnv;
use scitrace::model::{MetricRegistry, SpanKind, SpanStatus, TagSet};
use scitrace::sim::{oracle_check, run_scenario, ScenarioSpec};
use scitrace::store::{QueryRequest, ResultTable, Signal, Store};
use scitrace::trace::{span_end, span_start, SpanFile, SpanStart};

#[derive(Parser)]
#[command(name = "scitrace", version, about = "Job-level observability for batch scientific workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open and close spans from job scripts.
    #[command(subcommand)]
    Span(SpanCommand),
    /// Per-job cgroup monitoring agent.
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Run the ingestion service.
    Collector {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate stored telemetry into CSV tables and SVG charts.
    Analyze {
        #[command(subcommand)]
        op: AnalyzeOp,
        #[command(flatten)]
        common: AnalyzeArgs,
    },
    /// Synthetic end-to-end scenarios.
    #[command(subcommand)]
    Sim(SimCommand),
}

#[derive(Subcommand)]
enum SpanCommand {
    /// Opens a span; prints export lines for TRACEPARENT and the span handle.
    Start {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "custom")]
        kind: KindArg,
        #[arg(long = "attr", value_name = "K=V")]
        attrs: Vec<String>,
        #[arg(long)]
        force_new_trace: bool,
    },
    /// Closes a span and exports every closed span not yet delivered.
    End {
        #[arg(long)]
        handle: String,
        #[arg(long, value_enum, default_value = "ok")]
        status: StatusArg,
        #[arg(long, env = agent::ENDPOINT_ENV, default_value = agent::DEFAULT_ENDPOINT)]
        endpoint: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pipeline,
    Job,
    Task,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatusArg {
    Ok,
    Error,
}

#[derive(Subcommand)]
enum AgentCommand {
    /// Samples the job's cgroup until it disappears or the agent is signalled.
    Run {
        /// Agent options (`--interval 5s`, `--endpoint URL`, ...); any other flag becomes a tag.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0..)]
        args: Vec<String>,
    },
}

#[derive(Subcommand)]
enum AnalyzeOp {
    /// Sum of per-job carried-forward values per bucket.
    TotalUsage,
    /// Histogram of per-job maxima.
    MaxDist,
    /// Histogram of job durations in seconds.
    Durations,
    /// Running job count per bucket.
    ActiveJobs,
    /// Raw series of selected jobs.
    Grid,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Local store directory (offline use).
    #[arg(long, global = true, conflicts_with = "endpoint")]
    store: Option<PathBuf>,
    /// Collector base URL.
    #[arg(long, global = true, env = agent::ENDPOINT_ENV)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    metric: Option<String>,
    /// Unix nanoseconds or an RFC 3339 timestamp.
    #[arg(long, global = true, value_parser = parse_time)]
    start: Option<u64>,
    #[arg(long, global = true, value_parser = parse_time)]
    end: Option<u64>,
    #[arg(long = "attr", value_name = "K=V", global = true)]
    attrs: Vec<String>,
    #[arg(long, global = true, default_value = "60s", value_parser = humantime::parse_duration)]
    bucket: Duration,
    /// Sample interval; values go stale after two intervals.
    #[arg(long, global = true, default_value = "5s", value_parser = humantime::parse_duration)]
    interval: Duration,
    #[arg(long, global = true, default_value_t = analysis::DEFAULT_BIN_COUNT)]
    bins: usize,
    #[arg(long, global = true, default_value_t = 5)]
    k: usize,
    /// Explicit job ids for `grid`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    ids: Vec<u64>,
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true)]
    svg: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scratch directory for fixtures and the store; defaults next to `--out`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

fn parse_time(s: &str) -> Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    let t = humantime::parse_rfc3339_weak(s).map_err(|e| e.to_string())?;
    let d = t.duration_since(UNIX_EPOCH).map_err(|e| e.to_string())?;
    u64::try_from(d.as_nanos()).map_err(|e| e.to_string())
}

fn parse_attr(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected K=V, got {raw:?}"))
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;
type ChartWriter = Box<dyn Fn(&Path) -> Result<(), AnalysisError>>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Span(cmd) => span(cmd),
        Command::Agent(AgentCommand::Run { args }) => agent_run(&args),
        Command::Collector { config } => collector(&config),
        Command::Analyze { op, common } => analyze(op, &common),
        Command::Sim(SimCommand::Run { spec, out, work_dir }) => sim_run(&spec, &out, work_dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("scitrace: {e}");
            ExitCode::FAILURE
        }
    }
}

fn span(cmd: SpanCommand) -> CliResult {
    let file = SpanFile::from_env(&ProcessEnv);
    if let Some(dir) = file.path().parent() {
        std::fs::create_dir_all(dir)?;
    }
    match cmd {
        SpanCommand::Start {
            name,
            kind,
            attrs,
            force_new_trace,
        } => {
            let mut req = SpanStart::new(
                name,
                match kind {
                    KindArg::Pipeline => SpanKind::Pipeline,
                    KindArg::Job => SpanKind::Job,
                    KindArg::Task => SpanKind::Task,
                    KindArg::Custom => SpanKind::Custom,
                },
            );
            let mut tags = TagSet::new();
            for a in &attrs {
                let (k, v) = parse_attr(a)?;
                tags.insert(&k, v)?;
            }
            req.attributes = tags;
            req.force_new_trace = force_new_trace;
            let mut rng = OsRng.unwrap_err();
            let (span, envelope) = span_start(&file, req, &ProcessEnv, &SystemClock, &mut rng)?;
            println!("{}", envelope.export_line());
            println!("SCITRACE_SPAN_HANDLE={}", span.context.span_id());
            Ok(ExitCode::SUCCESS)
        }
        SpanCommand::End {
            handle,
            status,
            endpoint,
        } => {
            let status = match status {
                StatusArg::Ok => SpanStatus::Ok,
                StatusArg::Error => SpanStatus::Error,
            };
            let span = span_end(&file, &handle, status, &SystemClock)?;
            info!(handle = %handle, duration_ns = span.duration_nanos(), "span closed");
            let pending = file.pending_exports()?;
            let transport = HttpTransport::new(&endpoint, Duration::from_secs(10));
            let result = export_batch(
                &ExportBatch::Spans(pending.clone()),
                &transport,
                &RetryPolicy::new(3, Duration::from_millis(200)),
                &std::thread::sleep,
            );
            if result.is_accepted() {
                file.mark_exported(&pending)?;
            } else {
                // Left pending; the next `span end` retries them.
                warn!(?result, spans = pending.len(), "span export failed");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Raises `stop` on SIGINT or SIGTERM.
fn stop_on_signal(stop: StopSignal) {
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("signal runtime");
        rt.block_on(async {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
                .expect("SIGTERM handler");
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        });
        stop.stop();
    });
}

fn agent_run(args: &[String]) -> CliResult {
    let cfg = parse_monitoring_args(args, &ProcessEnv)?;
    cfg.validate()?;
    let transport = Arc::new(HttpTransport::new(&cfg.export_endpoint, Duration::from_secs(10)));
    let stop = StopSignal::new();
    stop_on_signal(stop.clone());
    let summary = agent::run_monitoring(cfg, &stop, &SystemClock, &RealTimePacer, transport);
    println!("{}", serde_json::to_string(&summary)?);
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn collector(config: &Path) -> CliResult {
    let cfg = PipelineConfig::load(config)?;
    let server = CollectorServer::start(&cfg, Arc::new(SystemClock))?;
    info!(endpoint = %server.endpoint(), "collector listening");
    let stop = StopSignal::new();
    stop_on_signal(stop.clone());
    while !stop.wait(Duration::from_secs(3600)) {}
    let report = server.shutdown();
    println!("{}", serde_json::to_string(&report.stats)?);
    if report.unflushed > 0 {
        warn!(records = report.unflushed, "records lost at shutdown");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

enum Source {
    Store(Store),
    Remote(QueryClient),
}

impl Source {
    fn query(&self, req: &QueryRequest) -> Result<ResultTable, Box<dyn std::error::Error>> {
        Ok(match self {
            Source::Store(s) => s.query(req)?,
            Source::Remote(c) => c.query(req)?,
        })
    }
}

fn analyze(op: AnalyzeOp, a: &AnalyzeArgs) -> CliResult {
    let source = match (&a.store, &a.endpoint) {
        (Some(dir), _) => Source::Store(Store::open(dir)?),
        (None, Some(url)) => Source::Remote(QueryClient::new(url, Duration::from_secs(60))),
        (None, None) => return Err("one of --store or --endpoint is required".into()),
    };
    let start = a.start.unwrap_or(0);
    let end = a.end.unwrap_or(u64::MAX);
    let range: TimeRange = a.start.zip(a.end);
    let mut attrs = Vec::new();
    for raw in &a.attrs {
        attrs.push(parse_attr(raw)?);
    }
    let request = |signal: Signal, metric: Option<&str>| {
        let mut req = QueryRequest::new(signal, start, end);
        if let Some(m) = metric {
            req.metric_names = Some(vec![m.to_owned()]);
        }
        req.attribute_filters.extend(attrs.iter().cloned());
        req
    };
    let metric = || a.metric.as_deref().ok_or("--metric is required for this analysis");
    let unit = |m: &str| MetricRegistry::standard().get(m).map(|d| d.unit.clone()).unwrap_or_default();
    let bucket = a.bucket.as_nanos() as u64;

    let (table, chart): (ResultTable, ChartWriter) = match op {
        AnalyzeOp::TotalUsage => {
            let m = metric()?;
            let rows = source.query(&request(Signal::Metrics, Some(m)))?.metric_rows()?;
            let ts = analysis::total_usage_over_time(&rows, m, bucket, a.interval.as_nanos() as u64, range)?;
            let labels = ChartLabels::new(format!("total {m}"), m, unit(m));
            (
                ts.to_table(),
                Box::new(move |p| write_chart(ChartData::Series(&ts), ChartKind::Line, &labels, p)),
            )
        }
        AnalyzeOp::MaxDist => {
            let m = metric()?;
            let rows = source.query(&request(Signal::Metrics, Some(m)))?.metric_rows()?;
            let d = analysis::max_per_job_distribution(&rows, m, a.bins)?;
            info!(jobs = d.jobs, min = d.min, max = d.max, mean = d.mean, "per-job maxima");
            let labels = ChartLabels::new(format!("maximum {m} per job"), m, unit(m));
            (
                d.to_table(),
                Box::new(move |p| write_chart(ChartData::Distribution(&d), ChartKind::Histogram, &labels, p)),
            )
        }
        AnalyzeOp::Durations => {
            let spans = source.query(&request(Signal::Spans, None))?.span_rows()?;
            let d = analysis::job_durations(&spans, a.bins)?;
            info!(jobs = d.distribution.jobs, open = d.open_count, "job durations");
            let labels = ChartLabels::new("job durations", "duration", "s");
            (
                d.distribution.to_table(),
                Box::new(move |p| {
                    write_chart(ChartData::Distribution(&d.distribution), ChartKind::Histogram, &labels, p)
                }),
            )
        }
        AnalyzeOp::ActiveJobs => {
            let spans = source.query(&request(Signal::Spans, None))?.span_rows()?;
            let ts = analysis::active_jobs_timeline(&spans, bucket, range)?;
            let labels = ChartLabels::new("active jobs", "active jobs", "");
            (
                ts.to_table(),
                Box::new(move |p| write_chart(ChartData::Series(&ts), ChartKind::Line, &labels, p)),
            )
        }
        AnalyzeOp::Grid => {
            let m = metric()?;
            let rows = source.query(&request(Signal::Metrics, Some(m)))?.metric_rows()?;
            let spans = source.query(&request(Signal::Spans, None))?.span_rows()?;
            let selector = if a.ids.is_empty() {
                JobSelector::ShortestK(a.k)
            } else {
                JobSelector::Ids(a.ids.clone())
            };
            let panels = analysis::per_job_grid(&rows, &spans, m, &selector)?;
            let labels = ChartLabels::new(format!("{m} per job"), m, unit(m));
            (
                analysis::grid_table(&panels),
                Box::new(move |p| write_chart(ChartData::Grid(&panels), ChartKind::Grid, &labels, p)),
            )
        }
    };

    match &a.csv {
        Some(path) => table.write_csv(std::fs::File::create(path)?)?,
        None => print!("{}", table.to_csv_string()),
    }
    if let Some(path) = &a.svg {
        chart(path)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn sim_run(spec_path: &Path, out: &Path, work_dir: Option<PathBuf>) -> CliResult {
    let spec = ScenarioSpec::from_json(&std::fs::read_to_string(spec_path)?)?;
    let work_dir = work_dir.unwrap_or_else(|| {
        let stem = out.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}-data"))
    });
    let run = run_scenario(&spec, &work_dir)?;
    let verdict = oracle_check(&run.report);
    let doc = serde_json::json!({ "report": run.report, "verdict": verdict });
    std::fs::write(out, serde_json::to_vec_pretty(&doc)?)?;
    for d in &verdict.diffs {
        eprintln!("mismatch {}: expected {} got {}", d.check, d.expected, d.actual);
    }
    println!("{}", if verdict.passed { "pass" } else { "fail" });
    Ok(if verdict.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
