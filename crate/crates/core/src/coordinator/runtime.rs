//! Event loop tying the coordinator, the scheduler and an executor together,
//! plus channel logs and replay.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::TaskId;
use crate::executors::{Executor, TaskResult, TaskSpec};
use crate::protocol::PipelineSpec;
use crate::scheduler::{
    Clock, ClockMode, EventKind, ResourcePool, ScheduledEvent, Scheduler, SchedulerError,
};
use crate::time::Time;

use super::report::{ReportError, RunReport};
use super::{Coordinator, CoordinatorConfig, CoordinatorError};

pub const PIPELINE_LOG: &str = "pipelines.jsonl";
pub const COMPLETION_LOG: &str = "completions.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("deadlock: no runnable work but the run is unfinished\n{0}")]
    Deadlock(String),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("channel log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub cpu_cores: u32,
    pub gpus: u32,
    pub clock: ClockMode,
    /// Simulated time spent before the first submission.
    pub bootstrap: Time,
    pub exec_setup: Time,
    pub coordinator: CoordinatorConfig,
    pub pipelines: Vec<PipelineSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub seq: u64,
    pub spec: PipelineSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub seq: u64,
    pub result: TaskResult,
}

/// Every message the coordinator consumed, stamped with a global order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelLog {
    pub pipelines: Vec<PipelineRecord>,
    pub completions: Vec<CompletionRecord>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| RunError::Log(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| RunError::Log(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

impl ChannelLog {
    pub fn write_to(&self, dir: &Path) -> Result<(), RunError> {
        write_jsonl(&dir.join(PIPELINE_LOG), &self.pipelines)?;
        write_jsonl(&dir.join(COMPLETION_LOG), &self.completions)
    }

    pub fn read_from(dir: &Path) -> Result<Self, RunError> {
        Ok(Self {
            pipelines: read_jsonl(&dir.join(PIPELINE_LOG))?,
            completions: read_jsonl(&dir.join(COMPLETION_LOG))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub events: Vec<ScheduledEvent>,
    pub log: ChannelLog,
}

struct Driver<'a> {
    coord: Coordinator,
    sched: Scheduler,
    events: Vec<ScheduledEvent>,
    log: ChannelLog,
    seq: u64,
    specs: HashMap<TaskId, TaskSpec>,
    executor: &'a dyn Executor,
}

impl Driver<'_> {
    fn submit(&mut self, tasks: Vec<TaskSpec>) -> Result<(), RunError> {
        for task in tasks {
            if self.sched.mode() == ClockMode::WallClock {
                self.specs.insert(task.id.clone(), task.clone());
            }
            let ev = self.sched.submit(task)?;
            self.events.push(ev);
        }
        Ok(())
    }

    fn on_pipeline(&mut self, spec: PipelineSpec) -> Result<(), RunError> {
        self.log.pipelines.push(PipelineRecord {
            seq: self.seq,
            spec: spec.clone(),
        });
        self.seq += 1;
        let tasks = self.coord.submit_pipeline(spec)?;
        self.submit(tasks)
    }

    fn on_completion(&mut self, result: TaskResult) -> Result<(), RunError> {
        self.log.completions.push(CompletionRecord {
            seq: self.seq,
            result: result.clone(),
        });
        self.seq += 1;
        let tasks = self.coord.on_task_complete(result)?;
        self.submit(tasks)
    }

    fn deadlock(&self) -> RunError {
        RunError::Deadlock(format!(
            "{}pending: {:?}\nrunning: {:?}",
            self.coord.dump(),
            self.sched.pending_ids(),
            self.sched.running_ids()
        ))
    }
}

fn execute_guarded(executor: &dyn Executor, task: &TaskSpec) -> TaskResult {
    catch_unwind(AssertUnwindSafe(|| executor.execute(task)))
        .unwrap_or_else(|_| TaskResult::failed(task.id.clone(), "executor panicked"))
}

/// Runs every submitted pipeline, and any sub-pipelines they spawn, to
/// completion.
pub fn run(setup: &RunSetup, executor: &dyn Executor) -> Result<RunOutcome, RunError> {
    let pool = ResourcePool::new(setup.cpu_cores, setup.gpus)?;
    let mut sched = Scheduler::new(pool, Clock::new(setup.clock), setup.exec_setup);
    sched.advance_clock_to(setup.bootstrap);
    let mut d = Driver {
        coord: Coordinator::new(setup.coordinator.clone())?,
        sched,
        events: Vec::new(),
        log: ChannelLog::default(),
        seq: 0,
        specs: HashMap::new(),
        executor,
    };
    let wall = setup.clock == ClockMode::WallClock;
    let (pipe_tx, pipe_rx) = mpsc::channel::<PipelineSpec>();
    let (done_tx, done_rx) = mpsc::channel::<TaskResult>();
    for spec in &setup.pipelines {
        pipe_tx.send(spec.clone()).expect("receiver is alive");
    }

    thread::scope(|scope| -> Result<(), RunError> {
        let (work_tx, work_rx) = mpsc::channel::<(TaskId, TaskResult)>();
        loop {
            let mut progressed = false;
            while let Ok(spec) = pipe_rx.try_recv() {
                d.on_pipeline(spec)?;
                progressed = true;
            }
            while let Ok(result) = done_rx.try_recv() {
                d.on_completion(result)?;
                progressed = true;
            }
            if d.coord.take_spawn_signal() {
                for spec in d.coord.maybe_spawn_subpipelines() {
                    pipe_tx.send(spec).expect("receiver is alive");
                    progressed = true;
                }
            }
            if progressed {
                continue;
            }

            let step = d.sched.schedule_step();
            progressed = !step.is_empty();
            if wall {
                for ev in step.iter().filter(|e| e.kind == EventKind::TaskStarted) {
                    let task = d.specs.remove(&ev.task_id).expect("started tasks were submitted");
                    let tx = work_tx.clone();
                    let executor = d.executor;
                    scope.spawn(move || {
                        let result = execute_guarded(executor, &task);
                        let _ = tx.send((task.id, result));
                    });
                }
            }
            d.events.extend(step);
            for f in d.sched.drain_finished() {
                let result = execute_guarded(d.executor, &f.task).with_timings(f.timings);
                done_tx.send(result).expect("receiver is alive");
                progressed = true;
            }
            if progressed {
                continue;
            }

            if wall && d.sched.running_len() > 0 {
                let (id, result) = work_rx.recv().expect("workers hold a sender");
                let ev = d.sched.complete(&id)?;
                d.events.push(ev);
                for f in d.sched.drain_finished() {
                    let r = if f.task.id == id { result.clone() } else { continue };
                    done_tx.send(r.with_timings(f.timings)).expect("receiver is alive");
                }
                continue;
            }
            if d.sched.is_idle() && d.coord.all_complete() {
                return Ok(());
            }
            return Err(d.deadlock());
        }
    })?;

    let pool = d.sched.pool();
    let report = d.coord.report(&d.events, pool.cpu_cores_total, pool.gpus_total)?;
    Ok(RunOutcome {
        report,
        events: d.events,
        log: d.log,
    })
}

/// Rebuilds the report from a channel log and the stored event trace.
pub fn replay(
    config: &CoordinatorConfig,
    log: &ChannelLog,
    events: &[ScheduledEvent],
    cpu_cores: u32,
    gpus: u32,
) -> Result<RunReport, RunError> {
    enum Msg<'a> {
        Pipeline(&'a PipelineSpec),
        Completion(&'a TaskResult),
    }
    let mut msgs: Vec<(u64, Msg)> = log
        .pipelines
        .iter()
        .map(|r| (r.seq, Msg::Pipeline(&r.spec)))
        .chain(log.completions.iter().map(|r| (r.seq, Msg::Completion(&r.result))))
        .collect();
    msgs.sort_by_key(|(seq, _)| *seq);
    if msgs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(RunError::Log("duplicate sequence numbers".into()));
    }
    let mut coord = Coordinator::new(config.clone())?;
    for (_, msg) in msgs {
        match msg {
            Msg::Pipeline(spec) => {
                coord.submit_pipeline(spec.clone())?;
            }
            Msg::Completion(result) => {
                coord.on_task_complete(result.clone())?;
            }
        }
    }
    Ok(coord.report(events, cpu_cores, gpus)?)
}
