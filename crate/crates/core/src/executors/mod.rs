//! Task descriptions, results, and the executors that turn one into the other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{CandidateSequence, PipelineId, ProteinStructure, QualityMetrics, TaskId};
use crate::time::Time;

mod subprocess;
mod synthetic;

pub use subprocess::{render_template, sandbox_dir_name, ParseRules, SubprocessConfig, SubprocessExecutor};
pub use synthetic::{SyntheticConfig, SyntheticExecutor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceGeneration,
    StructurePrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceClass {
    CpuBound,
    GpuBound,
}

/// One execution phase and the resources held while it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub class: ResourceClass,
    pub duration: Time,
    pub cpu_cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: PipelineId,
    pub lane: u32,
    pub cycle: u32,
    pub retry: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPayload {
    Generation {
        structure: ProteinStructure,
        num_sequences: u32,
        #[serde(default)]
        params: BTreeMap<String, String>,
    },
    Prediction {
        sequence: CandidateSequence,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    /// Peak core demand over all phases.
    pub cpu_cores: u32,
    /// Peak GPU demand over all phases.
    pub gpus: u32,
    pub phases: Vec<Phase>,
    pub payload: TaskPayload,
    pub provenance: Provenance,
}

impl TaskSpec {
    pub fn new(
        id: TaskId,
        kind: TaskKind,
        phases: Vec<Phase>,
        payload: TaskPayload,
        provenance: Provenance,
    ) -> Self {
        let cpu_cores = phases.iter().map(|p| p.cpu_cores).max().unwrap_or(0);
        let gpus = phases.iter().map(|p| p.gpus).max().unwrap_or(0);
        Self {
            id,
            kind,
            cpu_cores,
            gpus,
            phases,
            payload,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cpu_cores + self.gpus == 0 {
            return Err(format!("task {} demands no resources", self.id));
        }
        if self.phases.is_empty() {
            return Err(format!("task {} has no phases", self.id));
        }
        if self
            .phases
            .iter()
            .any(|p| p.cpu_cores > self.cpu_cores || p.gpus > self.gpus)
        {
            return Err(format!("task {} has a phase above its peak demand", self.id));
        }
        Ok(())
    }
}

/// Phase layouts for the two task kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfiles {
    pub generation: Vec<Phase>,
    pub prediction: Vec<Phase>,
}

impl TaskProfiles {
    /// Generation holds one GPU and one core for `generation_secs`. Prediction
    /// runs a four-core CPU phase for 80% of `prediction_secs`, then a single
    /// GPU phase for the remaining 20%.
    pub fn with_durations(generation_secs: f64, prediction_secs: f64) -> Self {
        Self {
            generation: vec![Phase {
                class: ResourceClass::GpuBound,
                duration: Time::from_secs_f64(generation_secs),
                cpu_cores: 1,
                gpus: 1,
            }],
            prediction: vec![
                Phase {
                    class: ResourceClass::CpuBound,
                    duration: Time::from_secs_f64(0.8 * prediction_secs),
                    cpu_cores: 4,
                    gpus: 0,
                },
                Phase {
                    class: ResourceClass::GpuBound,
                    duration: Time::from_secs_f64(0.2 * prediction_secs),
                    cpu_cores: 0,
                    gpus: 1,
                },
            ],
        }
    }
}

impl Default for TaskProfiles {
    fn default() -> Self {
        Self::with_durations(180.0, 1800.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Succeeded,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutputs {
    Sequences(Vec<CandidateSequence>),
    Prediction {
        structure: ProteinStructure,
        metrics: QualityMetrics,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTimings {
    pub queued_at: Time,
    pub started_at: Time,
    pub finished_at: Time,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: TaskId,
    pub status: TaskStatus,
    pub outputs: Option<TaskOutputs>,
    pub timings: TaskTimings,
}

impl TaskResult {
    pub fn succeeded(task_id: TaskId, outputs: TaskOutputs) -> Self {
        Self {
            task_id,
            status: TaskStatus::Succeeded,
            outputs: Some(outputs),
            timings: TaskTimings::default(),
        }
    }

    pub fn failed(task_id: TaskId, reason: impl Into<String>) -> Self {
        Self {
            task_id,
            status: TaskStatus::Failed(reason.into()),
            outputs: None,
            timings: TaskTimings::default(),
        }
    }

    pub fn with_timings(mut self, timings: TaskTimings) -> Self {
        self.timings = timings;
        self
    }
}

/// Runs one task to completion. Timings are stamped by the caller.
///
/// Implementations must return exactly one result per call and report
/// every failure as [`TaskStatus::Failed`].
pub trait Executor: Send + Sync {
    fn execute(&self, task: &TaskSpec) -> TaskResult;
}

impl<E: Executor + ?Sized> Executor for Box<E> {
    fn execute(&self, task: &TaskSpec) -> TaskResult {
        (**self).execute(task)
    }
}

impl<E: Executor + ?Sized> Executor for &E {
    fn execute(&self, task: &TaskSpec) -> TaskResult {
        (**self).execute(task)
    }
}
