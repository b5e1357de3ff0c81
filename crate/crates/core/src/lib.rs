//! Adaptive protein-design pipelines on a shared CPU/GPU pool.
//!
//! Pipelines alternate sequence generation and structure prediction per
//! input structure. An adaptive policy keeps a design only when its
//! composite quality score improves, retrying lower-ranked sequences
//! otherwise. A first-fit scheduler packs the resulting tasks onto the pool
//! phase by phase, and the coordinator spawns sub-pipelines to re-process
//! weak lanes while capacity is free.

pub mod coordinator;
pub mod domain;
pub mod executors;
pub mod protocol;
pub mod scheduler;
pub mod telemetry;
pub mod time;

pub use coordinator::{
    replay, run, ChannelLog, Coordinator, CoordinatorConfig, CoordinatorError, RunError,
    RunOutcome, RunReport, RunSetup, SubpipelinePolicy,
};
pub use domain::{
    composite_score, improved, CandidateSequence, DecisionKind, PipelineId, ProteinStructure,
    QualityMetrics, ScoreWeights, SequenceId, StructureId, StructurePayload, TaskId,
    TrajectoryRecord,
};
pub use executors::{Executor, SubprocessExecutor, SyntheticConfig, SyntheticExecutor, TaskProfiles};
pub use protocol::{PipelineSpec, Policy};
pub use scheduler::{ClockMode, ResourcePool, ScheduledEvent, Scheduler};
pub use time::Time;
