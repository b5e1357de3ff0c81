//! Run summaries derived from the event trace and the trajectory ledger.

use std::collections::{BTreeMap, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{summarize, DomainError, Summary, TaskId, TrajectoryRecord};
use crate::scheduler::{EventKind, ScheduledEvent, UtilizationPoint};
use crate::time::Time;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("incomplete run: {0}")]
    IncompleteRun(String),
    #[error("empty trajectory ledger")]
    EmptyLedger,
    #[error("cycle {0} has no accepted records but later cycles do")]
    NonContiguous(u32),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Wall-time accounting in seconds. `bootstrap`, `exec_setup`, `running`
/// and `idle` partition `total`: an instant counts as running if any task
/// executes then, otherwise as setup if any task is being prepared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MakespanBreakdown {
    pub bootstrap: f64,
    pub exec_setup: f64,
    pub running: f64,
    pub idle: f64,
    pub total: f64,
    /// Per-task setup durations summed.
    pub setup_sum: f64,
    /// Per-task execution durations summed.
    pub running_sum: f64,
}

/// Total length of the union of half-open intervals.
fn union_length(mut intervals: Vec<(Time, Time)>) -> u64 {
    intervals.sort();
    let mut total = 0;
    let mut cur: Option<(Time, Time)> = None;
    for (s, e) in intervals {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += (ce - cs).micros();
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += (ce - cs).micros();
    }
    total
}

pub fn makespan(events: &[ScheduledEvent]) -> Result<MakespanBreakdown, TelemetryError> {
    #[derive(Default)]
    struct Life {
        queued: Option<Time>,
        started: Option<Time>,
        exec: Option<Time>,
        finished: Option<Time>,
    }
    let mut lives: HashMap<&TaskId, Life> = HashMap::new();
    for ev in events {
        let life = lives.entry(&ev.task_id).or_default();
        match ev.kind {
            EventKind::TaskQueued => life.queued = Some(ev.time),
            EventKind::TaskStarted => life.started = Some(ev.time),
            EventKind::PhaseChanged if life.exec.is_none() => life.exec = Some(ev.time),
            EventKind::TaskFinished => life.finished = Some(ev.time),
            _ => {}
        }
    }
    if lives.is_empty() {
        return Err(TelemetryError::IncompleteRun("no tasks in trace".into()));
    }
    let first_queued = lives.values().filter_map(|l| l.queued).min();
    let mut setup = Vec::new();
    let mut running = Vec::new();
    let mut end = Time::ZERO;
    for (id, l) in &lives {
        let (Some(s), Some(x), Some(f)) = (l.started, l.exec, l.finished) else {
            return Err(TelemetryError::IncompleteRun(format!("task {id} did not finish")));
        };
        setup.push((s, x));
        running.push((x, f));
        end = end.max(f);
    }
    let bootstrap = first_queued.unwrap_or(Time::ZERO);
    let run_len = union_length(running.clone());
    let both = union_length(setup.iter().chain(running.iter()).copied().collect());
    let setup_only = both - run_len;
    let secs = |us: u64| Time(us).as_secs_f64();
    let total = end.micros();
    Ok(MakespanBreakdown {
        bootstrap: bootstrap.as_secs_f64(),
        exec_setup: secs(setup_only),
        running: secs(run_len),
        idle: secs(total.saturating_sub(bootstrap.micros() + both)),
        total: secs(total),
        setup_sum: secs(setup.iter().map(|(s, e)| (*e - *s).micros()).sum()),
        running_sum: secs(running.iter().map(|(s, e)| (*e - *s).micros()).sum()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePoint {
    pub cycle: u32,
    pub n: usize,
    pub plddt: Summary,
    pub ptm: Summary,
    pub iface_pae: Summary,
    pub score: Summary,
}

/// Per-cycle summaries of accepted designs across all lanes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub points: Vec<CyclePoint>,
}

pub fn metric_series(ledger: &[TrajectoryRecord]) -> Result<MetricSeries, TelemetryError> {
    if ledger.is_empty() {
        return Err(TelemetryError::EmptyLedger);
    }
    let mut by_cycle: BTreeMap<u32, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in ledger.iter().filter(|r| r.decision.is_acceptance()) {
        by_cycle.entry(r.cycle).or_default().push(r);
    }
    let mut points = Vec::with_capacity(by_cycle.len());
    for (expected, (cycle, recs)) in (1u32..).zip(by_cycle) {
        if cycle != expected {
            return Err(TelemetryError::NonContiguous(expected));
        }
        let col = |f: fn(&TrajectoryRecord) -> f64| -> Result<Summary, DomainError> {
            summarize(&recs.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        points.push(CyclePoint {
            cycle,
            n: recs.len(),
            plddt: col(|r| r.metrics.plddt)?,
            ptm: col(|r| r.metrics.ptm)?,
            iface_pae: col(|r| r.metrics.iface_pae)?,
            score: col(|r| r.score)?,
        });
    }
    Ok(MetricSeries { points })
}

/// `cycle,metric,n,median,half_std`, one row per cycle and metric.
pub fn write_series_csv<W: io::Write>(series: &MetricSeries, out: W) -> Result<(), TelemetryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cycle", "metric", "n", "median", "half_std"])?;
    for p in &series.points {
        for (name, s) in [
            ("plddt", p.plddt),
            ("ptm", p.ptm),
            ("iface_pae", p.iface_pae),
            ("score", p.score),
        ] {
            w.write_record([
                p.cycle.to_string(),
                name.to_owned(),
                p.n.to_string(),
                s.median.to_string(),
                s.half_std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Step function of busy resources: `time,busy_cpu,busy_gpu`.
pub fn write_timeline_csv<W: io::Write>(
    timeline: &[UtilizationPoint],
    out: W,
) -> Result<(), TelemetryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "busy_cpu", "busy_gpu"])?;
    for p in timeline {
        w.write_record([
            p.time.to_string(),
            p.busy_cpu.to_string(),
            p.busy_gpu.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DecisionKind, QualityMetrics};

    fn ev(t: f64, kind: EventKind, id: &str) -> ScheduledEvent {
        ScheduledEvent {
            time: Time::from_secs_f64(t),
            kind,
            task_id: TaskId::new(id),
            cpu_delta: 0,
            gpu_delta: 0,
        }
    }

    fn life(id: &str, q: f64, s: f64, x: f64, f: f64) -> Vec<ScheduledEvent> {
        vec![
            ev(q, EventKind::TaskQueued, id),
            ev(s, EventKind::TaskStarted, id),
            ev(x, EventKind::PhaseChanged, id),
            ev(f, EventKind::TaskFinished, id),
        ]
    }

    #[test]
    fn single_task_is_additive() {
        let m = makespan(&life("a", 0.5, 0.5, 1.5, 3.5)).unwrap();
        assert_eq!(m.bootstrap, 0.5);
        assert_eq!(m.exec_setup, 1.0);
        assert_eq!(m.running, 2.0);
        assert_eq!(m.total, 3.5);
        assert_eq!(m.idle, 0.0);
    }

    #[test]
    fn empty_trace_is_incomplete() {
        assert!(matches!(makespan(&[]), Err(TelemetryError::IncompleteRun(_))));
        let mut unfinished = life("a", 0.0, 0.0, 1.0, 2.0);
        unfinished.pop();
        assert!(makespan(&unfinished).is_err());
    }

    #[test]
    fn overlapping_runs_use_the_envelope() {
        let mut events = life("a", 0.0, 0.0, 0.0, 2.0);
        events.extend(life("b", 0.0, 0.0, 0.0, 2.0));
        let m = makespan(&events).unwrap();
        assert_eq!(m.running, 2.0);
        assert_eq!(m.running_sum, 4.0);
    }

    #[test]
    fn phases_partition_total() {
        let mut events = life("a", 1.0, 1.0, 2.0, 5.0);
        events.extend(life("b", 1.0, 4.0, 6.0, 7.0));
        events.extend(life("c", 1.0, 9.0, 9.5, 10.0));
        let m = makespan(&events).unwrap();
        // running [2,5) [6,7) [9.5,10); setup-only [1,2) [5,6) [9,9.5); idle [7,9)
        assert_eq!(m.running, 4.5);
        assert_eq!(m.exec_setup, 2.5);
        assert_eq!(m.idle, 2.0);
        assert_eq!(m.bootstrap + m.exec_setup + m.running + m.idle, m.total);
    }

    fn rec(cycle: u32, plddt: f64, decision: DecisionKind, pipeline: &str) -> TrajectoryRecord {
        TrajectoryRecord {
            trajectory_id: format!("{pipeline}-{cycle}-{plddt}"),
            pipeline_id: pipeline.into(),
            lane: 0,
            structure_lineage: "s".into(),
            cycle,
            sequence: "q".into(),
            metrics: QualityMetrics::new(plddt, 0.5, 5.0),
            score: plddt / 100.0,
            decision,
        }
    }

    #[test]
    fn singleton_groups_have_zero_spread() {
        let ledger: Vec<_> = (1..=4).map(|c| rec(c, 50.0 + c as f64, DecisionKind::Accept, "p")).collect();
        let s = metric_series(&ledger).unwrap();
        assert_eq!(s.points.len(), 4);
        assert!(s.points.iter().all(|p| p.plddt.half_std == 0.0 && p.n == 1));
    }

    #[test]
    fn groups_by_cycle_across_pipelines_and_skips_retries() {
        let ledger = vec![
            rec(1, 60.0, DecisionKind::Accept, "a"),
            rec(1, 70.0, DecisionKind::Accept, "b"),
            rec(2, 10.0, DecisionKind::Retry, "a"),
            rec(2, 80.0, DecisionKind::CompleteLane, "a"),
        ];
        let s = metric_series(&ledger).unwrap();
        assert_eq!(s.points[0].n, 2);
        assert_eq!(s.points[0].plddt.median, 65.0);
        assert_eq!(s.points[1].n, 1);
        assert_eq!(s.points[1].plddt.median, 80.0);
    }

    #[test]
    fn empty_ledger_is_an_error() {
        assert!(matches!(metric_series(&[]), Err(TelemetryError::EmptyLedger)));
    }
}
