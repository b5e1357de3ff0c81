use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use adaptflow_core::coordinator::{replay, run, ChannelLog, CoordinatorConfig, RunError, RunReport};
use adaptflow_core::domain::summarize;
use adaptflow_core::executors::{Executor, SubprocessExecutor, SyntheticExecutor};
use adaptflow_core::scheduler::{read_trace_csv, utilization, write_trace_csv};
use adaptflow_core::telemetry::{metric_series, write_series_csv, write_timeline_csv};
use adaptflow_core::time::Time;
use anyhow::Context;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExecutorKind, RunConfig};

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SERIES_FILE: &str = "series.csv";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Deadlock(RunError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Deadlock(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Deadlock(_) => CliError::Deadlock(e),
            other => CliError::Other(other.into()),
        }
    }
}

/// What `report` needs to replay a run without the original config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub cpu_cores: u32,
    pub gpus: u32,
    pub coordinator: CoordinatorConfig,
}

fn build_executor(config: &RunConfig, seed: u64) -> Result<Box<dyn Executor>, CliError> {
    Ok(match config.executor.kind {
        ExecutorKind::Synthetic => Box::new(
            SyntheticExecutor::new(config.executor.synthetic.clone(), seed)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        ),
        ExecutorKind::Subprocess => {
            let sub = config.executor.subprocess.clone().expect("validated");
            Box::new(SubprocessExecutor::new(sub))
        }
    })
}

fn json_file<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Runs one seed and writes every artifact into `out`.
pub fn run_once(config: &RunConfig, seed: u64, out: &Path) -> Result<RunReport, CliError> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let setup = config.setup(seed);
    let executor = build_executor(config, seed)?;
    let outcome = run(&setup, executor.as_ref())?;

    let trace = out.join(TRACE_FILE);
    write_trace_csv(&outcome.events, File::create(&trace).context("trace.csv")?)
        .context("writing trace")?;
    json_file(&out.join(REPORT_FILE), &outcome.report)?;
    json_file(
        &out.join(RUN_FILE),
        &RunManifest {
            cpu_cores: setup.cpu_cores,
            gpus: setup.gpus,
            coordinator: setup.coordinator.clone(),
        },
    )?;
    if !outcome.report.trajectories.is_empty() {
        let series = metric_series(&outcome.report.trajectories).context("metric series")?;
        write_series_csv(&series, File::create(out.join(SERIES_FILE)).context("series.csv")?).context("writing series")?;
    }
    let end = outcome.events.iter().map(|e| e.time).max().unwrap_or(Time::ZERO);
    let util = utilization(&outcome.events, setup.cpu_cores, setup.gpus, (Time::ZERO, end))
        .context("utilization")?;
    write_timeline_csv(&util.timeline, File::create(out.join(TIMELINE_FILE)).context("timeline.csv")?)
        .context("writing timeline")?;
    outcome.log.write_to(out).context("writing channel logs")?;
    Ok(outcome.report)
}

pub struct RunArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub seeds: u32,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

/// Returns the reports written, one per seed.
pub fn cmd_run(args: &RunArgs) -> Result<Vec<(PathBuf, RunReport)>, CliError> {
    let config = RunConfig::load(&args.config, &args.overrides)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out, set ADAPTFLOW_OUT or output_dir".into()))?;
    let base = args.seed.or(config.seed).unwrap_or(0);
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let mut reports = Vec::new();
    for i in 0..args.seeds as u64 {
        let seed = base + i;
        let dir = if args.seeds == 1 {
            out.clone()
        } else {
            out.join(format!("seed-{seed:04}"))
        };
        log::info!("running seed {seed} into {}", dir.display());
        let report = run_once(&config, seed, &dir)?;
        reports.push((dir, report));
    }
    Ok(reports)
}

/// Rebuilds a run's report from its stored trace and channel logs.
pub fn cmd_report(dir: &Path) -> Result<RunReport, CliError> {
    let read = |name: &str| -> Result<String, CliError> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
    };
    let manifest: RunManifest = serde_json::from_str(&read(RUN_FILE)?)
        .map_err(|e| CliError::Usage(format!("{RUN_FILE}: {e}")))?;
    let events = read_trace_csv(read(TRACE_FILE)?.as_bytes()).context("reading trace")?;
    let log = ChannelLog::read_from(dir)?;
    Ok(replay(&manifest.coordinator, &log, &events, manifest.cpu_cores, manifest.gpus)?)
}

fn collect_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let meta = fs::metadata(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        out.push(path.to_owned());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

pub fn load_reports(path: &Path) -> Result<Vec<RunReport>, CliError> {
    let mut files = Vec::new();
    collect_reports(path, &mut files)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no {REPORT_FILE} under {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: not a run report: {e}", f.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub diff: Option<f64>,
    /// `diff` relative to `|b|`, in percent.
    pub relative_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a_runs: usize,
    pub b_runs: usize,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

/// Median over runs of a per-run value; runs lacking it are skipped.
fn across(reports: &[RunReport], f: impl Fn(&RunReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(f).collect();
    summarize(&v).ok().map(|s| s.median)
}

type Extract = fn(&RunReport) -> Option<f64>;

const COMPARED: &[(&str, Extract)] = &[
    ("final_score_median", |r| r.final_score_median()),
    ("final_plddt_median", |r| r.final_summary.map(|s| s.plddt.median)),
    ("final_plddt_half_std", |r| r.final_summary.map(|s| s.plddt.half_std)),
    ("net_delta_plddt", |r| r.net_deltas.map(|d| d.plddt)),
    ("net_delta_ptm", |r| r.net_deltas.map(|d| d.ptm)),
    ("net_delta_iface_pae", |r| r.net_deltas.map(|d| d.iface_pae)),
    ("net_delta_score", |r| r.net_deltas.map(|d| d.score)),
    ("cpu_pct", |r| Some(r.utilization.cpu_pct)),
    ("gpu_pct", |r| Some(r.utilization.gpu_pct)),
    ("makespan_total", |r| Some(r.makespan.total)),
    ("makespan_running", |r| Some(r.makespan.running)),
    ("trajectories", |r| Some(r.counts.trajectories as f64)),
    ("sub_pipelines", |r| Some(r.counts.sub_pipelines as f64)),
];

pub fn compare(a: &[RunReport], b: &[RunReport]) -> Comparison {
    let rows = COMPARED
        .iter()
        .map(|(name, f)| {
            let va = across(a, f);
            let vb = across(b, f);
            let diff = va.zip(vb).map(|(x, y)| x - y);
            let relative_pct = diff.zip(vb).and_then(|(d, y)| {
                if y == 0.0 {
                    (d == 0.0).then_some(0.0)
                } else {
                    Some(d / y.abs() * 100.0)
                }
            });
            CompareRow {
                metric: (*name).to_owned(),
                a: va,
                b: vb,
                diff,
                relative_pct,
            }
        })
        .collect();
    Comparison {
        a_runs: a.len(),
        b_runs: b.len(),
        rows,
    }
}

pub fn cmd_compare(a: &Path, b: &Path) -> Result<Comparison, CliError> {
    Ok(compare(&load_reports(a)?, &load_reports(b)?))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"))
}

pub fn render_comparison(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "runs: a={} b={}", c.a_runs, c.b_runs);
    let _ = writeln!(s, "{:<22} {:>12} {:>12} {:>12} {:>10}", "metric", "a", "b", "a-b", "rel%");
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:<22} {:>12} {:>12} {:>12} {:>10}",
            r.metric,
            opt(r.a),
            opt(r.b),
            opt(r.diff),
            r.relative_pct.map_or_else(|| "-".to_owned(), |x| format!("{x:+.1}"))
        );
    }
    s
}

pub fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    let c = &r.counts;
    let _ = writeln!(s, "seed {}", r.seed);
    let _ = writeln!(
        s,
        "pipelines {}  sub-pipelines {}  lanes {} (completed {}, terminated {})  trajectories {}",
        c.pipelines, c.sub_pipelines, c.lanes, c.completed_lanes, c.terminated_lanes, c.trajectories
    );
    if let Some(d) = r.net_deltas {
        let _ = writeln!(
            s,
            "net deltas over {} lanes: plddt {:+.3}  ptm {:+.4}  iface_pae {:+.3}  score {:+.4}",
            d.lanes, d.plddt, d.ptm, d.iface_pae, d.score
        );
    }
    if let Some(f) = r.final_summary {
        let _ = writeln!(
            s,
            "final candidates {}: score {:.4} ± {:.4}  plddt {:.2} ± {:.2}",
            f.n, f.score.median, f.score.half_std, f.plddt.median, f.plddt.half_std
        );
    }
    let _ = writeln!(
        s,
        "utilization: cpu {:.2}%  gpu {:.2}%",
        r.utilization.cpu_pct, r.utilization.gpu_pct
    );
    let m = &r.makespan;
    let _ = writeln!(
        s,
        "makespan {:.1}s: bootstrap {:.1}  exec setup {:.1}  running {:.1}  idle {:.1}",
        m.total, m.bootstrap, m.exec_setup, m.running, m.idle
    );
    if !r.per_cycle.is_empty() {
        let _ = writeln!(s, "cycle   n   plddt          ptm            iface_pae      score");
        for p in &r.per_cycle {
            let _ = writeln!(
                s,
                "{:>5} {:>3}   {:>6.2}±{:<6.2} {:>6.3}±{:<6.3} {:>6.2}±{:<6.2} {:>6.4}±{:<6.4}",
                p.cycle,
                p.n,
                p.plddt.median,
                p.plddt.half_std,
                p.ptm.median,
                p.ptm.half_std,
                p.iface_pae.median,
                p.iface_pae.half_std,
                p.score.median,
                p.score.half_std
            );
        }
    }
    s
}
