//! Workload builders shared by the benchmarks.

use adaptflow_core::coordinator::{CoordinatorConfig, RunSetup, SubpipelinePolicy};
use adaptflow_core::domain::{ProteinStructure, StructurePayload, TaskId};
use adaptflow_core::executors::{
    Phase, Provenance, ResourceClass, TaskKind, TaskPayload, TaskProfiles, TaskSpec,
};
use adaptflow_core::protocol::{PipelineSpec, Policy};
use adaptflow_core::scheduler::{Clock, ResourcePool, ScheduledEvent, Scheduler};
use adaptflow_core::time::Time;
use adaptflow_core::ClockMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CPU_CORES: u32 = 28;
pub const GPUS: u32 = 4;

/// `n` tasks with one to three phases of random class, size and duration.
pub fn random_tasks(n: usize, seed: u64) -> Vec<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let phases = (0..rng.random_range(1..=3))
                .map(|_| {
                    let gpu = rng.random_bool(0.5);
                    Phase {
                        class: if gpu { ResourceClass::GpuBound } else { ResourceClass::CpuBound },
                        duration: Time::from_secs_f64(rng.random_range(1.0..500.0)),
                        cpu_cores: rng.random_range(if gpu { 0..=2 } else { 1..=16 }),
                        gpus: if gpu { rng.random_range(1..=GPUS) } else { 0 },
                    }
                })
                .collect();
            TaskSpec::new(
                TaskId::new(format!("t{i:05}")),
                TaskKind::StructurePrediction,
                phases,
                TaskPayload::Generation {
                    structure: ProteinStructure::initial("s", StructurePayload::Synthetic { fitness: 0.5 }),
                    num_sequences: 1,
                    params: Default::default(),
                },
                Provenance {
                    pipeline: "bench".into(),
                    lane: 0,
                    cycle: 1,
                    retry: 0,
                },
            )
        })
        .collect()
}

/// Submits everything up front and steps the simulated clock until idle.
pub fn drain(tasks: Vec<TaskSpec>) -> Vec<ScheduledEvent> {
    let pool = ResourcePool::new(CPU_CORES, GPUS).expect("non-empty pool");
    let mut s = Scheduler::new(pool, Clock::simulated(), Time::from_secs_f64(2.0));
    let mut events = Vec::with_capacity(tasks.len() * 6);
    for t in tasks {
        events.push(s.submit(t).expect("tasks fit the pool"));
    }
    loop {
        let step = s.schedule_step();
        if step.is_empty() {
            break;
        }
        events.extend(step);
        s.drain_finished();
    }
    events
}

/// `pipelines` adaptive pipelines of `lanes` synthetic structures each,
/// with sub-pipelines on when `spawn` is set.
pub fn pipeline_setup(pipelines: usize, lanes: usize, spawn: bool, seed: u64) -> RunSetup {
    let specs = (0..pipelines)
        .map(|p| {
            let structures = (0..lanes)
                .map(|i| {
                    let fitness = 0.3 + 0.35 * i as f64 / lanes.max(2).saturating_sub(1) as f64;
                    ProteinStructure::initial(format!("p{p}s{i}"), StructurePayload::Synthetic { fitness })
                })
                .collect();
            PipelineSpec::new(format!("p{p}"), structures, Policy::Adaptive)
        })
        .collect();
    RunSetup {
        cpu_cores: CPU_CORES,
        gpus: GPUS,
        clock: ClockMode::Simulated,
        bootstrap: Time::from_secs_f64(60.0),
        exec_setup: Time::from_secs_f64(5.0),
        coordinator: CoordinatorConfig {
            seed,
            profiles: TaskProfiles::with_durations(180.0, 1800.0),
            subpipelines: SubpipelinePolicy {
                enabled: spawn,
                max_subpipelines: if spawn { 7 } else { 0 },
                ..Default::default()
            },
            ..Default::default()
        },
        pipelines: specs,
    }
}
