//! Owns every pipeline, routes task completions into the protocol, keeps
//! the trajectory ledger, and decides when to spawn sub-pipelines.
//!
//! The coordinator is driven by exactly two kinds of message: a pipeline
//! submission and a task completion. Everything else it does is a pure
//! function of the state those messages built, which is what makes a run
//! replayable from its channel logs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    composite_score, quantile, DomainError, PipelineId, ScoreWeights, TaskId, TrajectoryRecord,
    DEFAULT_PAE_MAX,
};
use crate::executors::{TaskProfiles, TaskResult, TaskSpec};
use crate::protocol::{
    Action, LaneRef, PipelineEvent, PipelineSpec, PipelineState, ProtocolError, ProtocolParams,
};

mod report;
mod runtime;

pub use report::{
    Counts, FinalCandidate, FinalSummary, LaneReport, NetDeltas, PipelineReport, ReportError,
    RunReport, UtilizationReport,
};
pub use runtime::{
    replay, run, ChannelLog, CompletionRecord, PipelineRecord, RunError, RunOutcome, RunSetup,
    COMPLETION_LOG, PIPELINE_LOG,
};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("pipeline {0} is already registered")]
    DuplicatePipeline(PipelineId),
    #[error("parent pipeline {0} is not registered")]
    UnknownParent(PipelineId),
    #[error("no live pipeline owns task {0}")]
    UnknownTask(TaskId),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubpipelinePolicy {
    pub enabled: bool,
    /// Finished lanes scoring below this quantile are re-processed.
    pub quality_quantile: f64,
    pub max_subpipelines: u32,
    /// Cycles per sub-pipeline; the parent's count when absent.
    pub cycles: Option<u32>,
}

impl Default for SubpipelinePolicy {
    fn default() -> Self {
        Self {
            enabled: false,
            quality_quantile: 0.5,
            max_subpipelines: 0,
            cycles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub weights: ScoreWeights,
    pub pae_max: f64,
    pub subpipelines: SubpipelinePolicy,
    pub final_cycle_adaptive: bool,
    pub seed: u64,
    pub profiles: TaskProfiles,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            pae_max: DEFAULT_PAE_MAX,
            subpipelines: SubpipelinePolicy::default(),
            final_cycle_adaptive: true,
            seed: 0,
            profiles: TaskProfiles::default(),
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), CoordinatorError> {
        self.weights.validate()?;
        let q = self.subpipelines.quality_quantile;
        if !(q > 0.0 && q < 1.0) {
            return Err(CoordinatorError::Config(format!(
                "quality_quantile {q} must lie strictly between 0 and 1"
            )));
        }
        if self.subpipelines.cycles == Some(0) {
            return Err(CoordinatorError::Config("sub-pipeline cycles must be >= 1".into()));
        }
        if !(self.pae_max.is_finite() && self.pae_max > 0.0) {
            return Err(CoordinatorError::Config("pae_max must be > 0".into()));
        }
        Ok(())
    }

    fn protocol_params(&self) -> ProtocolParams {
        ProtocolParams {
            weights: self.weights,
            pae_max: self.pae_max,
            final_cycle_adaptive: self.final_cycle_adaptive,
            seed: self.seed,
            profiles: self.profiles.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    state: PipelineState,
    in_flight: usize,
    deferred: VecDeque<TaskSpec>,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    config: CoordinatorConfig,
    order: Vec<PipelineId>,
    pipelines: BTreeMap<PipelineId, Entry>,
    task_owner: HashMap<TaskId, PipelineId>,
    delivered: HashSet<TaskId>,
    ledger: Vec<TrajectoryRecord>,
    /// Lane -> the root lane of its lineage.
    lineage: BTreeMap<LaneRef, LaneRef>,
    reprocessed: BTreeSet<LaneRef>,
    finished_lanes: Vec<LaneRef>,
    lanes_finished_since_spawn: bool,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Result<Self, CoordinatorError> {
        config.validate()?;
        Ok(Self {
            config,
            order: Vec::new(),
            pipelines: BTreeMap::new(),
            task_owner: HashMap::new(),
            delivered: HashSet::new(),
            ledger: Vec::new(),
            lineage: BTreeMap::new(),
            reprocessed: BTreeSet::new(),
            finished_lanes: Vec::new(),
            lanes_finished_since_spawn: false,
        })
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn ledger(&self) -> &[TrajectoryRecord] {
        &self.ledger
    }

    pub fn pipeline(&self, id: &PipelineId) -> Option<&PipelineState> {
        self.pipelines.get(id).map(|e| &e.state)
    }

    /// Pipelines in registration order.
    pub fn pipelines(&self) -> impl Iterator<Item = &PipelineState> {
        self.order.iter().map(|id| &self.pipelines[id].state)
    }

    pub fn all_complete(&self) -> bool {
        self.pipelines.values().all(|e| e.state.is_complete())
    }

    pub fn subpipeline_count(&self) -> usize {
        self.pipelines
            .values()
            .filter(|e| e.state.spec.parent.is_some())
            .count()
    }

    /// Registers a pipeline and returns the tasks to hand to the scheduler.
    pub fn submit_pipeline(&mut self, spec: PipelineSpec) -> Result<Vec<TaskSpec>, CoordinatorError> {
        if self.pipelines.contains_key(&spec.id) {
            return Err(CoordinatorError::DuplicatePipeline(spec.id));
        }
        if let Some(parent) = &spec.parent {
            if !self.pipelines.contains_key(parent) {
                return Err(CoordinatorError::UnknownParent(parent.clone()));
            }
        }
        let id = spec.id.clone();
        let root = spec.reprocesses.as_ref().map(|r| self.root_of(r));
        let (state, actions) = PipelineState::start(spec, self.config.protocol_params())?;
        if let Some(root) = &root {
            self.reprocessed.insert(root.clone());
        }
        for lane in &state.lanes {
            let here = LaneRef {
                pipeline: id.clone(),
                lane: lane.index,
            };
            let r = root.clone().unwrap_or_else(|| here.clone());
            self.lineage.insert(here, r);
        }
        log::debug!("registered pipeline {id} with {} lanes", state.lanes.len());
        self.order.push(id.clone());
        self.pipelines.insert(
            id.clone(),
            Entry {
                state,
                in_flight: 0,
                deferred: VecDeque::new(),
            },
        );
        Ok(self.apply(&id, actions))
    }

    /// Routes one completion. Duplicates and results for finished
    /// pipelines are dropped without effect.
    pub fn on_task_complete(&mut self, result: TaskResult) -> Result<Vec<TaskSpec>, CoordinatorError> {
        let owner = self
            .task_owner
            .get(&result.task_id)
            .cloned()
            .ok_or_else(|| CoordinatorError::UnknownTask(result.task_id.clone()))?;
        if !self.delivered.insert(result.task_id.clone()) {
            log::debug!("dropping duplicate result for {}", result.task_id);
            return Ok(Vec::new());
        }
        let entry = self.pipelines.get_mut(&owner).expect("owner is registered");
        entry.in_flight = entry.in_flight.saturating_sub(1);
        if entry.state.is_complete() {
            log::info!("dropping result {} for finished pipeline {owner}", result.task_id);
            return Ok(Vec::new());
        }
        let (next, actions) = entry.state.advance(&PipelineEvent::TaskCompleted(result))?;
        entry.state = next;
        Ok(self.apply(&owner, actions))
    }

    fn apply(&mut self, id: &PipelineId, actions: Vec<Action>) -> Vec<TaskSpec> {
        let entry = self.pipelines.get_mut(id).expect("registered");
        for action in actions {
            match action {
                Action::SubmitTask(task) => {
                    self.task_owner.insert(task.id.clone(), id.clone());
                    entry.deferred.push_back(task);
                }
                Action::RecordTrajectory(rec) => self.ledger.push(rec),
                Action::Decision { lane, cycle, kind } => {
                    log::debug!("{id} lane {lane} cycle {cycle}: {kind:?}");
                }
                Action::LaneFinished { lane, status } => {
                    log::debug!("{id} lane {lane} finished: {status:?}");
                    self.finished_lanes.push(LaneRef {
                        pipeline: id.clone(),
                        lane,
                    });
                    // Only decisions in top-level pipelines spawn; a finished
                    // sub-pipeline never triggers another round by itself.
                    if entry.state.spec.parent.is_none() {
                        self.lanes_finished_since_spawn = true;
                    }
                }
                Action::PipelineCompleted => log::debug!("pipeline {id} complete"),
            }
        }
        let release = if entry.state.spec.sequential {
            usize::from(entry.in_flight == 0).min(entry.deferred.len())
        } else {
            entry.deferred.len()
        };
        entry.in_flight += release;
        entry.deferred.drain(..release).collect()
    }

    /// True once per batch of top-level lane completions; callers use it to
    /// decide when to look for sub-pipelines.
    pub fn take_spawn_signal(&mut self) -> bool {
        std::mem::take(&mut self.lanes_finished_since_spawn)
    }

    fn root_of(&self, lane: &LaneRef) -> LaneRef {
        self.lineage.get(lane).cloned().unwrap_or_else(|| lane.clone())
    }

    /// Finished lanes with a final candidate, and its composite score.
    fn scored_finished_lanes(&self) -> Vec<(LaneRef, f64)> {
        self.finished_lanes
            .iter()
            .filter_map(|r| {
                let lane = &self.pipelines[&r.pipeline].state.lanes[r.lane as usize];
                let metrics = lane.final_candidate.as_ref()?.metrics?;
                let score = composite_score(&metrics, &self.config.weights, self.config.pae_max).ok()?;
                Some((r.clone(), score))
            })
            .collect()
    }

    /// Specs for sub-pipelines that should re-process low-scoring lanes.
    /// Read-only; the caller submits the returned specs.
    pub fn maybe_spawn_subpipelines(&self) -> Vec<PipelineSpec> {
        let policy = &self.config.subpipelines;
        let spawned = self.subpipeline_count() as u32;
        if !policy.enabled || spawned >= policy.max_subpipelines {
            return Vec::new();
        }
        let scored = self.scored_finished_lanes();
        let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let Ok(threshold) = quantile(&scores, policy.quality_quantile) else {
            return Vec::new();
        };
        let mut low: Vec<(LaneRef, f64)> = scored
            .into_iter()
            .filter(|(r, s)| *s < threshold && !self.reprocessed.contains(&self.root_of(r)))
            .collect();
        low.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let budget = (policy.max_subpipelines - spawned) as usize;
        let mut seen_roots = BTreeSet::new();
        low.into_iter()
            .filter(|(r, _)| seen_roots.insert(self.root_of(r)))
            .take(budget)
            .enumerate()
            .map(|(i, (r, _))| {
                let parent = &self.pipelines[&r.pipeline].state;
                let lane = &parent.lanes[r.lane as usize];
                let structure = lane.final_candidate.clone().expect("scored lanes have one");
                PipelineSpec {
                    id: PipelineId::new(format!("{}.sub{}", r.pipeline, spawned as usize + i + 1)),
                    input_structures: vec![structure],
                    cycles: policy.cycles.unwrap_or(parent.spec.cycles),
                    sequences_per_structure: parent.spec.sequences_per_structure,
                    retry_limit: parent.spec.retry_limit,
                    policy: parent.spec.policy,
                    parent: Some(r.pipeline.clone()),
                    generation_params: parent.spec.generation_params.clone(),
                    sequential: false,
                    reprocesses: Some(r),
                }
            })
            .collect()
    }

    /// Human-readable state summary for deadlock diagnostics.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for p in self.pipelines() {
            let e = &self.pipelines[p.id()];
            out.push_str(&format!(
                "pipeline {} in_flight={} deferred={}\n",
                p.id(),
                e.in_flight,
                e.deferred.len()
            ));
            for l in &p.lanes {
                out.push_str(&format!(
                    "  lane {} cycle {} status {:?} pending {:?}\n",
                    l.index, l.cycle, l.status, l.pending_task
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ProteinStructure, QualityMetrics, StructurePayload};
    use crate::executors::{Executor, SyntheticConfig, SyntheticExecutor};
    use crate::protocol::{LaneStatus, Policy};

    fn structures(n: usize) -> Vec<ProteinStructure> {
        (0..n)
            .map(|i| ProteinStructure::initial(format!("s{}", i + 1), StructurePayload::Synthetic { fitness: 0.3 + 0.1 * i as f64 }))
            .collect()
    }

    fn cont_v() -> PipelineSpec {
        PipelineSpec::new("cont-v", structures(4), Policy::Control)
    }

    #[test]
    fn control_spec_creates_lanes_and_generation_tasks() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let tasks = c.submit_pipeline(cont_v()).unwrap();
        assert_eq!(tasks.len(), 4);
        assert_eq!(c.pipeline(&"cont-v".into()).unwrap().lanes.len(), 4);
    }

    #[test]
    fn sequential_pipelines_release_one_task_at_a_time() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let spec = PipelineSpec { sequential: true, ..cont_v() };
        let tasks = c.submit_pipeline(spec).unwrap();
        assert_eq!(tasks.len(), 1);
        let ex = SyntheticExecutor::new(SyntheticConfig::default(), 1).unwrap();
        let next = c.on_task_complete(ex.execute(&tasks[0])).unwrap();
        assert_eq!(next.len(), 1);
    }

    #[test]
    fn rejects_empty_and_duplicate_specs() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let empty = PipelineSpec::new("e", vec![], Policy::Adaptive);
        assert!(matches!(c.submit_pipeline(empty), Err(CoordinatorError::Protocol(_))));
        c.submit_pipeline(cont_v()).unwrap();
        assert!(matches!(c.submit_pipeline(cont_v()), Err(CoordinatorError::DuplicatePipeline(_))));
    }

    #[test]
    fn sub_pipeline_needs_a_registered_parent() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let orphan = PipelineSpec { parent: Some("ghost".into()), ..cont_v() };
        assert!(matches!(c.submit_pipeline(orphan), Err(CoordinatorError::UnknownParent(_))));
        c.submit_pipeline(cont_v()).unwrap();
        let child = PipelineSpec { id: "child".into(), parent: Some("cont-v".into()), ..cont_v() };
        c.submit_pipeline(child).unwrap();
        assert_eq!(c.subpipeline_count(), 1);
        assert_eq!(c.pipeline(&"child".into()).unwrap().spec.parent.as_ref().unwrap().as_str(), "cont-v");
    }

    #[test]
    fn duplicate_and_unknown_results() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let tasks = c.submit_pipeline(cont_v()).unwrap();
        let ex = SyntheticExecutor::new(SyntheticConfig::default(), 1).unwrap();
        let res = ex.execute(&tasks[0]);
        assert_eq!(c.on_task_complete(res.clone()).unwrap().len(), 1);
        let before = format!("{:?}", c.pipeline(&"cont-v".into()).unwrap());
        assert!(c.on_task_complete(res).unwrap().is_empty());
        assert_eq!(before, format!("{:?}", c.pipeline(&"cont-v".into()).unwrap()));
        let bogus = TaskResult::failed("nope".into(), "x");
        assert!(matches!(c.on_task_complete(bogus), Err(CoordinatorError::UnknownTask(_))));
    }

    #[test]
    fn quantile_must_be_open_interval() {
        let mut cfg = CoordinatorConfig::default();
        cfg.subpipelines.quality_quantile = 1.0;
        assert!(Coordinator::new(cfg).is_err());
    }

    /// Builds a coordinator whose four lanes finished with the given pLDDTs.
    fn finished_with(plddts: &[f64], budget: u32) -> Coordinator {
        let cfg = CoordinatorConfig {
            subpipelines: SubpipelinePolicy {
                enabled: true,
                quality_quantile: 0.5,
                max_subpipelines: budget,
                cycles: None,
            },
            ..Default::default()
        };
        let mut c = Coordinator::new(cfg).unwrap();
        let spec = PipelineSpec { cycles: 1, ..PipelineSpec::new("p", structures(plddts.len()), Policy::Adaptive) };
        c.submit_pipeline(spec).unwrap();
        let entry = c.pipelines.get_mut(&PipelineId::new("p")).unwrap();
        for (i, v) in plddts.iter().enumerate() {
            let lane = &mut entry.state.lanes[i];
            lane.status = LaneStatus::Completed;
            lane.pending_task = None;
            lane.final_candidate = Some(ProteinStructure::predicted(
                format!("f{i}"),
                StructurePayload::Synthetic { fitness: 0.5 },
                1,
                "q".into(),
                QualityMetrics::new(*v, 0.5, 10.0),
            ));
            c.finished_lanes.push(LaneRef { pipeline: "p".into(), lane: i as u32 });
        }
        c
    }

    #[test]
    fn spawn_budget_zero_is_empty() {
        assert!(finished_with(&[10.0, 20.0, 30.0, 40.0], 0).maybe_spawn_subpipelines().is_empty());
    }

    #[test]
    fn spawn_below_median() {
        // Oracle: threshold is the median of the four composite scores;
        // only lanes strictly below it qualify.
        let c = finished_with(&[10.0, 20.0, 30.0, 40.0], 7);
        let specs = c.maybe_spawn_subpipelines();
        assert_eq!(specs.len(), 2);
        let lanes: Vec<u32> = specs.iter().map(|s| s.reprocesses.as_ref().unwrap().lane).collect();
        assert_eq!(lanes, vec![0, 1]);
        assert!(specs.iter().all(|s| s.input_structures.len() == 1 && s.parent.is_some()));
        let c = finished_with(&[10.0, 20.0, 30.0, 40.0], 1);
        assert_eq!(c.maybe_spawn_subpipelines().len(), 1);
    }

    #[test]
    fn reprocessed_lineages_are_not_selected_again() {
        let mut c = finished_with(&[10.0, 20.0, 30.0, 40.0], 7);
        for s in c.maybe_spawn_subpipelines() {
            c.submit_pipeline(s).unwrap();
        }
        assert_eq!(c.subpipeline_count(), 2);
        assert!(c.maybe_spawn_subpipelines().is_empty());
    }

    #[test]
    fn only_top_level_lane_completions_raise_the_spawn_signal() {
        let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
        let root = PipelineSpec { cycles: 1, ..PipelineSpec::new("root", structures(1), Policy::Adaptive) };
        let child = PipelineSpec { id: "root.sub1".into(), parent: Some("root".into()), ..root.clone() };
        let mut held = c.submit_pipeline(root).unwrap();
        let mut queue = c.submit_pipeline(child).unwrap();
        let ex = SyntheticExecutor::new(SyntheticConfig::default(), 3).unwrap();
        while let Some(t) = queue.pop() {
            queue.extend(c.on_task_complete(ex.execute(&t)).unwrap());
        }
        assert!(c.pipeline(&"root.sub1".into()).unwrap().is_complete());
        assert!(!c.take_spawn_signal());
        while let Some(t) = held.pop() {
            held.extend(c.on_task_complete(ex.execute(&t)).unwrap());
        }
        assert!(c.take_spawn_signal());
        assert!(!c.take_spawn_signal());
    }
}
