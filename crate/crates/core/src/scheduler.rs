//! Slot scheduler over a fixed pool of CPU cores and GPUs.
//!
//! Pending tasks are dispatched first-fit in submission order; a task that
//! does not fit is skipped so smaller tasks behind it can start. Multi-phase
//! tasks release their current phase's resources at each boundary and
//! re-acquire what the next phase needs, going back to the queue if it is
//! not free.
//!
//! In simulated mode the scheduler owns a discrete-event clock and advances
//! it to the next timer once nothing else can start. In wall-clock mode
//! tasks hold their peak demand until the caller reports completion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::TaskId;
use crate::executors::{TaskSpec, TaskTimings};
use crate::time::Time;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("task {task} needs {cpu} cores / {gpu} GPUs but the pool has {cpu_total} / {gpu_total}")]
    ExceedsCapacity {
        task: TaskId,
        cpu: u32,
        gpu: u32,
        cpu_total: u32,
        gpu_total: u32,
    },
    #[error("task {0} was already submitted")]
    Duplicate(TaskId),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("task {0} is not running")]
    NotRunning(TaskId),
    #[error("operation requires {0} clock mode")]
    WrongMode(&'static str),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Demand {
    pub cpu: u32,
    pub gpu: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePool {
    pub cpu_cores_total: u32,
    pub gpus_total: u32,
    pub free_cpu: u32,
    pub free_gpu: u32,
    pub allocations: BTreeMap<TaskId, Demand>,
}

impl ResourcePool {
    pub fn new(cpu_cores_total: u32, gpus_total: u32) -> Result<Self, SchedulerError> {
        if cpu_cores_total < 1 {
            return Err(SchedulerError::InvalidPool("at least one CPU core".into()));
        }
        Ok(Self {
            cpu_cores_total,
            gpus_total,
            free_cpu: cpu_cores_total,
            free_gpu: gpus_total,
            allocations: BTreeMap::new(),
        })
    }

    pub fn fits(&self, d: Demand) -> bool {
        d.cpu <= self.free_cpu && d.gpu <= self.free_gpu
    }

    fn allocate(&mut self, task: &TaskId, d: Demand) {
        debug_assert!(self.fits(d));
        self.free_cpu -= d.cpu;
        self.free_gpu -= d.gpu;
        self.allocations.insert(task.clone(), d);
    }

    fn release(&mut self, task: &TaskId) -> Demand {
        let d = self.allocations.remove(task).unwrap_or_default();
        self.free_cpu += d.cpu;
        self.free_gpu += d.gpu;
        d
    }

    /// Allocated plus free equals total for both resource classes.
    pub fn is_conserved(&self) -> bool {
        let (cpu, gpu) = self
            .allocations
            .values()
            .fold((0u64, 0u64), |(c, g), d| (c + d.cpu as u64, g + d.gpu as u64));
        cpu + self.free_cpu as u64 == self.cpu_cores_total as u64
            && gpu + self.free_gpu as u64 == self.gpus_total as u64
            && self.free_cpu <= self.cpu_cores_total
            && self.free_gpu <= self.gpus_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Simulated,
    WallClock,
}

/// Monotonic run clock, starting at zero.
#[derive(Debug, Clone)]
pub struct Clock {
    mode: ClockMode,
    now: Time,
    origin: Instant,
}

impl Clock {
    pub fn simulated() -> Self {
        Self::new(ClockMode::Simulated)
    }

    pub fn wall() -> Self {
        Self::new(ClockMode::WallClock)
    }

    pub fn new(mode: ClockMode) -> Self {
        Self {
            mode,
            now: Time::ZERO,
            origin: Instant::now(),
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&mut self) -> Time {
        if self.mode == ClockMode::WallClock {
            let t = Time::from_micros(self.origin.elapsed().as_micros() as u64);
            self.now = self.now.max(t);
        }
        self.now
    }

    /// Moves simulated time forward; never backwards.
    pub fn advance_to(&mut self, t: Time) {
        if self.mode == ClockMode::Simulated {
            self.now = self.now.max(t);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    TaskQueued,
    TaskStarted,
    PhaseChanged,
    TaskFinished,
    AllocFailedRequeued,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::TaskQueued => "TaskQueued",
            EventKind::TaskStarted => "TaskStarted",
            EventKind::PhaseChanged => "PhaseChanged",
            EventKind::TaskFinished => "TaskFinished",
            EventKind::AllocFailedRequeued => "AllocFailedRequeued",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = SchedulerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "TaskQueued" => EventKind::TaskQueued,
            "TaskStarted" => EventKind::TaskStarted,
            "PhaseChanged" => EventKind::PhaseChanged,
            "TaskFinished" => EventKind::TaskFinished,
            "AllocFailedRequeued" => EventKind::AllocFailedRequeued,
            other => return Err(SchedulerError::Trace(format!("unknown event kind {other:?}"))),
        })
    }
}

/// One scheduler event. Deltas are changes in busy resources: positive
/// when acquired, negative when released.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub time: Time,
    pub kind: EventKind,
    pub task_id: TaskId,
    pub cpu_delta: i64,
    pub gpu_delta: i64,
}

impl ScheduledEvent {
    fn new(time: Time, kind: EventKind, task_id: &TaskId, cpu_delta: i64, gpu_delta: i64) -> Self {
        Self {
            time,
            kind,
            task_id: task_id.clone(),
            cpu_delta,
            gpu_delta,
        }
    }
}

/// A task whose last phase ended, with its lifecycle timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishedTask {
    pub task: TaskSpec,
    pub timings: TaskTimings,
}

#[derive(Debug, Clone)]
struct Pending {
    task: TaskSpec,
    next_phase: usize,
    queued_at: Time,
    started_at: Option<Time>,
}

#[derive(Debug, Clone)]
struct Running {
    seq: u64,
    task: TaskSpec,
    /// `None` while in setup.
    phase: Option<usize>,
    queued_at: Time,
    started_at: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimerKind {
    SetupDone,
    PhaseEnd,
}

fn phase_demand(task: &TaskSpec, phase: usize) -> Demand {
    let p = &task.phases[phase];
    Demand {
        cpu: p.cpu_cores,
        gpu: p.gpus,
    }
}

fn peak_demand(task: &TaskSpec) -> Demand {
    Demand {
        cpu: task.cpu_cores,
        gpu: task.gpus,
    }
}

pub struct Scheduler {
    pool: ResourcePool,
    clock: Clock,
    exec_setup: Time,
    pending: BTreeMap<u64, Pending>,
    next_seq: u64,
    running: BTreeMap<TaskId, Running>,
    timers: BTreeSet<(Time, TaskId, TimerKind)>,
    finished: Vec<FinishedTask>,
    known: BTreeSet<TaskId>,
}

impl Scheduler {
    pub fn new(pool: ResourcePool, clock: Clock, exec_setup: Time) -> Self {
        Self {
            pool,
            clock,
            exec_setup,
            pending: BTreeMap::new(),
            next_seq: 0,
            running: BTreeMap::new(),
            timers: BTreeSet::new(),
            finished: Vec::new(),
            known: BTreeSet::new(),
        }
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn now(&mut self) -> Time {
        self.clock.now()
    }

    pub fn mode(&self) -> ClockMode {
        self.clock.mode()
    }

    pub fn advance_clock_to(&mut self, t: Time) {
        self.clock.advance_to(t);
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty() && self.running.is_empty()
    }

    pub fn pending_ids(&self) -> Vec<TaskId> {
        self.pending.values().map(|p| p.task.id.clone()).collect()
    }

    pub fn running_ids(&self) -> Vec<TaskId> {
        self.running.keys().cloned().collect()
    }

    /// What each pending task needs to start its next phase, in queue order.
    pub fn pending_demands(&self) -> Vec<(TaskId, Demand)> {
        let wall = self.clock.mode() == ClockMode::WallClock;
        self.pending
            .values()
            .map(|p| {
                let d = if wall {
                    peak_demand(&p.task)
                } else {
                    phase_demand(&p.task, p.next_phase)
                };
                (p.task.id.clone(), d)
            })
            .collect()
    }

    /// Queues a task. Demands above the pool totals are rejected outright.
    pub fn submit(&mut self, task: TaskSpec) -> Result<ScheduledEvent, SchedulerError> {
        task.validate().map_err(SchedulerError::InvalidTask)?;
        if task.cpu_cores > self.pool.cpu_cores_total || task.gpus > self.pool.gpus_total {
            return Err(SchedulerError::ExceedsCapacity {
                task: task.id.clone(),
                cpu: task.cpu_cores,
                gpu: task.gpus,
                cpu_total: self.pool.cpu_cores_total,
                gpu_total: self.pool.gpus_total,
            });
        }
        if !self.known.insert(task.id.clone()) {
            return Err(SchedulerError::Duplicate(task.id));
        }
        let now = self.clock.now();
        let ev = ScheduledEvent::new(now, EventKind::TaskQueued, &task.id, 0, 0);
        self.pending.insert(
            self.next_seq,
            Pending {
                task,
                next_phase: 0,
                queued_at: now,
                started_at: None,
            },
        );
        self.next_seq += 1;
        Ok(ev)
    }

    /// Starts everything that fits; if nothing could start in simulated mode,
    /// jumps the clock to the next timer and fires every timer due then.
    pub fn schedule_step(&mut self) -> Vec<ScheduledEvent> {
        let events = self.dispatch();
        if !events.is_empty() || self.clock.mode() == ClockMode::WallClock {
            return events;
        }
        self.fire_next_timers()
    }

    /// Tasks whose final phase ended since the last call.
    pub fn drain_finished(&mut self) -> Vec<FinishedTask> {
        std::mem::take(&mut self.finished)
    }

    /// Wall-clock completion of a running task.
    pub fn complete(&mut self, task_id: &TaskId) -> Result<ScheduledEvent, SchedulerError> {
        if self.clock.mode() != ClockMode::WallClock {
            return Err(SchedulerError::WrongMode("wall-clock"));
        }
        let run = self
            .running
            .remove(task_id)
            .ok_or_else(|| SchedulerError::NotRunning(task_id.clone()))?;
        let now = self.clock.now();
        let d = self.pool.release(task_id);
        self.finished.push(FinishedTask {
            task: run.task,
            timings: TaskTimings {
                queued_at: run.queued_at,
                started_at: run.started_at,
                finished_at: now,
            },
        });
        Ok(ScheduledEvent::new(
            now,
            EventKind::TaskFinished,
            task_id,
            -(d.cpu as i64),
            -(d.gpu as i64),
        ))
    }

    fn dispatch(&mut self) -> Vec<ScheduledEvent> {
        let now = self.clock.now();
        let wall = self.clock.mode() == ClockMode::WallClock;
        let mut events = Vec::new();
        let seqs: Vec<u64> = self.pending.keys().copied().collect();
        for seq in seqs {
            let entry = &self.pending[&seq];
            let need = if wall {
                peak_demand(&entry.task)
            } else {
                phase_demand(&entry.task, entry.next_phase)
            };
            if !self.pool.fits(need) {
                continue;
            }
            let p = self.pending.remove(&seq).expect("key from snapshot");
            let id = p.task.id.clone();
            self.pool.allocate(&id, need);
            let (dc, dg) = (need.cpu as i64, need.gpu as i64);
            if p.next_phase == 0 {
                events.push(ScheduledEvent::new(now, EventKind::TaskStarted, &id, dc, dg));
                let mut phase = None;
                if wall {
                    events.push(ScheduledEvent::new(now, EventKind::PhaseChanged, &id, 0, 0));
                    phase = Some(0);
                } else {
                    self.timers
                        .insert((now + self.exec_setup, id.clone(), TimerKind::SetupDone));
                }
                self.running.insert(
                    id,
                    Running {
                        seq,
                        task: p.task,
                        phase,
                        queued_at: p.queued_at,
                        started_at: now,
                    },
                );
            } else {
                events.push(ScheduledEvent::new(now, EventKind::PhaseChanged, &id, dc, dg));
                let dur = p.task.phases[p.next_phase].duration;
                self.timers.insert((now + dur, id.clone(), TimerKind::PhaseEnd));
                self.running.insert(
                    id,
                    Running {
                        seq,
                        task: p.task,
                        phase: Some(p.next_phase),
                        queued_at: p.queued_at,
                        started_at: p.started_at.unwrap_or(now),
                    },
                );
            }
        }
        events
    }

    fn fire_next_timers(&mut self) -> Vec<ScheduledEvent> {
        let Some((t, _, _)) = self.timers.first().cloned() else {
            return Vec::new();
        };
        self.clock.advance_to(t);
        let mut events = Vec::new();
        while let Some(first) = self.timers.first() {
            if first.0 != t {
                break;
            }
            let (_, id, kind) = self.timers.pop_first().expect("non-empty");
            match kind {
                TimerKind::SetupDone => self.on_setup_done(t, &id, &mut events),
                TimerKind::PhaseEnd => self.on_phase_end(t, &id, &mut events),
            }
        }
        events
    }

    fn on_setup_done(&mut self, t: Time, id: &TaskId, events: &mut Vec<ScheduledEvent>) {
        let run = self.running.get_mut(id).expect("timer for running task");
        run.phase = Some(0);
        let dur = run.task.phases[0].duration;
        events.push(ScheduledEvent::new(t, EventKind::PhaseChanged, id, 0, 0));
        self.timers.insert((t + dur, id.clone(), TimerKind::PhaseEnd));
    }

    fn on_phase_end(&mut self, t: Time, id: &TaskId, events: &mut Vec<ScheduledEvent>) {
        let run = self.running.remove(id).expect("timer for running task");
        let phase = run.phase.expect("phase end after setup");
        let held = self.pool.release(id);
        if phase + 1 == run.task.phases.len() {
            events.push(ScheduledEvent::new(
                t,
                EventKind::TaskFinished,
                id,
                -(held.cpu as i64),
                -(held.gpu as i64),
            ));
            self.finished.push(FinishedTask {
                task: run.task,
                timings: TaskTimings {
                    queued_at: run.queued_at,
                    started_at: run.started_at,
                    finished_at: t,
                },
            });
            return;
        }
        let next = phase_demand(&run.task, phase + 1);
        if self.pool.fits(next) {
            self.pool.allocate(id, next);
            events.push(ScheduledEvent::new(
                t,
                EventKind::PhaseChanged,
                id,
                next.cpu as i64 - held.cpu as i64,
                next.gpu as i64 - held.gpu as i64,
            ));
            let dur = run.task.phases[phase + 1].duration;
            self.timers.insert((t + dur, id.clone(), TimerKind::PhaseEnd));
            self.running.insert(
                id.clone(),
                Running {
                    phase: Some(phase + 1),
                    ..run
                },
            );
        } else {
            events.push(ScheduledEvent::new(
                t,
                EventKind::AllocFailedRequeued,
                id,
                -(held.cpu as i64),
                -(held.gpu as i64),
            ));
            // Requeued tasks keep their original submission slot.
            let seq = run.seq;
            self.pending.insert(
                seq,
                Pending {
                    task: run.task,
                    next_phase: phase + 1,
                    queued_at: run.queued_at,
                    started_at: Some(run.started_at),
                },
            );
        }
    }
}

/// Busy resource counts from one event time onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationPoint {
    pub time: Time,
    pub busy_cpu: u32,
    pub busy_gpu: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub cpu_pct: f64,
    pub gpu_pct: f64,
    pub timeline: Vec<UtilizationPoint>,
}

/// Busy resource-time over `[t0, t1]` as a percentage of pool capacity.
pub fn utilization(
    events: &[ScheduledEvent],
    cpu_total: u32,
    gpu_total: u32,
    horizon: (Time, Time),
) -> Result<Utilization, SchedulerError> {
    let (t0, t1) = horizon;
    if t1 <= t0 {
        return Err(SchedulerError::Trace(format!(
            "empty horizon [{t0}, {t1}]"
        )));
    }
    let mut busy_cpu: i64 = 0;
    let mut busy_gpu: i64 = 0;
    let mut cpu_area: u128 = 0;
    let mut gpu_area: u128 = 0;
    let mut last = t0;
    let mut timeline: Vec<UtilizationPoint> = Vec::new();
    for ev in events {
        if ev.time > last && ev.time > t0 {
            let from = last.max(t0);
            let to = ev.time.min(t1);
            if to > from {
                let span = (to - from).micros() as u128;
                cpu_area += busy_cpu.max(0) as u128 * span;
                gpu_area += busy_gpu.max(0) as u128 * span;
            }
            last = ev.time;
        }
        busy_cpu += ev.cpu_delta;
        busy_gpu += ev.gpu_delta;
        if busy_cpu < 0 || busy_gpu < 0 {
            return Err(SchedulerError::Trace(format!(
                "negative busy count after event for {} at {}",
                ev.task_id, ev.time
            )));
        }
        let point = UtilizationPoint {
            time: ev.time,
            busy_cpu: busy_cpu as u32,
            busy_gpu: busy_gpu as u32,
        };
        match timeline.last_mut() {
            Some(p) if p.time == ev.time => *p = point,
            _ => timeline.push(point),
        }
    }
    if t1 > last {
        let span = (t1 - last.max(t0)).micros() as u128;
        cpu_area += busy_cpu.max(0) as u128 * span;
        gpu_area += busy_gpu.max(0) as u128 * span;
    }
    let span = (t1 - t0).micros() as f64;
    let pct = |area: u128, total: u32| {
        if total == 0 {
            0.0
        } else {
            area as f64 / (total as f64 * span) * 100.0
        }
    };
    Ok(Utilization {
        cpu_pct: pct(cpu_area, cpu_total),
        gpu_pct: pct(gpu_area, gpu_total),
        timeline,
    })
}

pub const TRACE_HEADER: [&str; 5] = ["time", "kind", "task_id", "cpu_delta", "gpu_delta"];

/// Writes the event trace as CSV with a header row.
pub fn write_trace_csv<W: io::Write>(events: &[ScheduledEvent], out: W) -> Result<(), SchedulerError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for ev in events {
        w.write_record([
            ev.time.to_string(),
            ev.kind.to_string(),
            ev.task_id.to_string(),
            ev.cpu_delta.to_string(),
            ev.gpu_delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: io::Read>(input: R) -> Result<Vec<ScheduledEvent>, SchedulerError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(SchedulerError::Trace(format!("unexpected header {headers:?}")));
    }
    let mut events = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| SchedulerError::Trace(format!("row {}: bad {what}", i + 2));
        let time: Time = rec[0].parse().map_err(|_| bad("time"))?;
        let kind: EventKind = rec[1].parse()?;
        events.push(ScheduledEvent {
            time,
            kind,
            task_id: TaskId::new(&rec[2]),
            cpu_delta: rec[3].parse().map_err(|_| bad("cpu_delta"))?,
            gpu_delta: rec[4].parse().map_err(|_| bad("gpu_delta"))?,
        });
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PipelineId, ProteinStructure, StructurePayload};
    use crate::executors::{Phase, Provenance, ResourceClass, TaskKind, TaskPayload, TaskProfiles};

    fn task(id: &str, phases: Vec<Phase>) -> TaskSpec {
        TaskSpec::new(
            TaskId::new(id),
            TaskKind::SequenceGeneration,
            phases,
            TaskPayload::Generation {
                structure: ProteinStructure::initial("s", StructurePayload::Synthetic { fitness: 0.5 }),
                num_sequences: 1,
                params: Default::default(),
            },
            Provenance {
                pipeline: PipelineId::new("p"),
                lane: 0,
                cycle: 1,
                retry: 0,
            },
        )
    }

    fn gpu_task(id: &str, gpus: u32, secs: f64) -> TaskSpec {
        task(
            id,
            vec![Phase {
                class: ResourceClass::GpuBound,
                duration: Time::from_secs_f64(secs),
                cpu_cores: 0,
                gpus,
            }],
        )
    }

    fn sched(cpu: u32, gpu: u32) -> Scheduler {
        Scheduler::new(ResourcePool::new(cpu, gpu).unwrap(), Clock::simulated(), Time::ZERO)
    }

    fn run_to_end(s: &mut Scheduler) -> Vec<ScheduledEvent> {
        let mut all = Vec::new();
        loop {
            let evs = s.schedule_step();
            assert!(s.pool().is_conserved());
            if evs.is_empty() {
                break;
            }
            all.extend(evs);
        }
        all
    }

    #[test]
    fn rejects_demand_above_capacity() {
        let mut s = sched(28, 4);
        assert!(matches!(
            s.submit(gpu_task("big", 5, 1.0)),
            Err(SchedulerError::ExceedsCapacity { .. })
        ));
    }

    #[test]
    fn waits_for_a_free_gpu() {
        let mut s = sched(4, 1);
        s.submit(gpu_task("a", 1, 2.0)).unwrap();
        s.submit(gpu_task("b", 1, 1.0)).unwrap();
        let evs = run_to_end(&mut s);
        let started: Vec<_> = evs
            .iter()
            .filter(|e| e.kind == EventKind::TaskStarted)
            .map(|e| (e.task_id.as_str().to_owned(), e.time))
            .collect();
        assert_eq!(started, vec![("a".into(), Time::ZERO), ("b".into(), Time::from_secs_f64(2.0))]);
    }

    #[test]
    fn four_single_gpu_tasks_run_concurrently() {
        let mut s = sched(28, 4);
        for i in 0..4 {
            s.submit(gpu_task(&format!("t{i}"), 1, 1.0)).unwrap();
        }
        let evs = s.schedule_step();
        assert_eq!(evs.iter().filter(|e| e.kind == EventKind::TaskStarted).count(), 4);
        assert_eq!(s.pool().free_gpu, 0);
    }

    #[test]
    fn skip_lets_small_tasks_pass_a_blocked_wide_one() {
        let mut s = sched(4, 4);
        s.submit(gpu_task("hold", 3, 10.0)).unwrap();
        s.schedule_step();
        s.submit(gpu_task("wide", 4, 1.0)).unwrap();
        s.submit(gpu_task("small", 1, 1.0)).unwrap();
        let evs = s.schedule_step();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].task_id.as_str(), "small");
    }

    #[test]
    fn quiescent_scheduler_emits_nothing() {
        let mut s = sched(4, 1);
        assert!(s.schedule_step().is_empty());
        assert_eq!(s.now(), Time::ZERO);
    }

    #[test]
    fn two_phase_task_trace() {
        let mut s = Scheduler::new(ResourcePool::new(28, 4).unwrap(), Clock::simulated(), Time::from_secs_f64(1.0));
        let mut t = task("pred", TaskProfiles::with_durations(100.0, 10.0).prediction);
        t.kind = TaskKind::StructurePrediction;
        s.submit(t).unwrap();
        let evs = run_to_end(&mut s);
        let got: Vec<_> = evs.iter().map(|e| (e.time.to_string(), e.kind, e.cpu_delta, e.gpu_delta)).collect();
        assert_eq!(
            got,
            vec![
                ("0.000000".into(), EventKind::TaskStarted, 4, 0),
                ("1.000000".into(), EventKind::PhaseChanged, 0, 0),
                ("9.000000".into(), EventKind::PhaseChanged, -4, 1),
                ("11.000000".into(), EventKind::TaskFinished, 0, -1),
            ]
        );
        let done = s.drain_finished();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].timings.finished_at, Time::from_secs_f64(11.0));
    }

    #[test]
    fn blocked_phase_change_requeues() {
        let mut s = sched(8, 1);
        s.submit(task("pred", TaskProfiles::with_durations(1.0, 10.0).prediction)).unwrap();
        s.submit(gpu_task("gpu", 1, 20.0)).unwrap();
        let evs = run_to_end(&mut s);
        let kinds: Vec<_> = evs.iter().filter(|e| e.task_id.as_str() == "pred").map(|e| (e.time, e.kind)).collect();
        assert!(kinds.contains(&(Time::from_secs_f64(8.0), EventKind::AllocFailedRequeued)));
        assert!(kinds.contains(&(Time::from_secs_f64(20.0), EventKind::PhaseChanged)));
        assert_eq!(kinds.last().unwrap(), &(Time::from_secs_f64(22.0), EventKind::TaskFinished));
    }

    #[test]
    fn wall_clock_completion() {
        let mut s = Scheduler::new(ResourcePool::new(4, 1).unwrap(), Clock::wall(), Time::ZERO);
        s.submit(gpu_task("w", 1, 5.0)).unwrap();
        let evs = s.schedule_step();
        assert_eq!(evs[0].kind, EventKind::TaskStarted);
        assert!(s.schedule_step().is_empty());
        let fin = s.complete(&TaskId::new("w")).unwrap();
        assert_eq!((fin.kind, fin.gpu_delta), (EventKind::TaskFinished, -1));
        assert!(s.is_idle());
        assert!(s.complete(&TaskId::new("w")).is_err());
    }

    #[test]
    fn utilization_direct_ratio() {
        let ev = |t: f64, k, d| ScheduledEvent {
            time: Time::from_secs_f64(t),
            kind: k,
            task_id: TaskId::new("x"),
            cpu_delta: 0,
            gpu_delta: d,
        };
        let events = vec![ev(0.0, EventKind::TaskStarted, 1), ev(10.0, EventKind::TaskFinished, -1)];
        let u = utilization(&events, 28, 4, (Time::ZERO, Time::from_secs_f64(10.0))).unwrap();
        assert_eq!(u.gpu_pct, 25.0);
        assert_eq!(u.cpu_pct, 0.0);
        let idle = utilization(&[], 28, 4, (Time::ZERO, Time::from_secs_f64(1.0))).unwrap();
        assert_eq!((idle.cpu_pct, idle.gpu_pct), (0.0, 0.0));
        assert!(utilization(&[], 28, 4, (Time::ZERO, Time::ZERO)).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut s = sched(8, 2);
        let mut events = Vec::new();
        for i in 0..5 {
            events.push(s.submit(task(&format!("p/L{i},x"), TaskProfiles::with_durations(1.0, 3.3).prediction)).unwrap());
        }
        events.extend(run_to_end(&mut s));
        let mut buf = Vec::new();
        write_trace_csv(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,kind,task_id,cpu_delta,gpu_delta\n"));
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), events);
    }
}
