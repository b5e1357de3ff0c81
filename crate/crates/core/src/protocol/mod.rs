//! The design-pipeline state machine.
//!
//! A pipeline owns one lane per input structure. Each lane cycles through
//! sequence generation, ranking, structure prediction and a keep/retry/stop
//! decision. [`PipelineState::advance`] is a pure transition: it never
//! mutates its receiver and returns the follow-on actions for the caller to
//! carry out.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    composite_score, improved, rank_sequences, seed_stream, CandidateSequence, DecisionKind,
    DomainError, PipelineId, ProteinStructure, QualityMetrics, ScoreWeights, StructureId, TaskId,
    TrajectoryRecord, DEFAULT_PAE_MAX,
};
use crate::executors::{
    Provenance, TaskKind, TaskOutputs, TaskPayload, TaskProfiles, TaskResult, TaskSpec, TaskStatus,
};

pub mod fasta;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("state error: {0}")]
    State(String),
    #[error("task {0} does not belong to this pipeline")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Rank-ordered selection with improvement gating and retries.
    Adaptive,
    /// Random selection, every prediction accepted.
    Control,
}

/// A lane of a specific pipeline.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LaneRef {
    pub pipeline: PipelineId,
    pub lane: u32,
}

fn default_cycles() -> u32 {
    4
}
fn default_k() -> u32 {
    10
}
fn default_r() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub id: PipelineId,
    pub input_structures: Vec<ProteinStructure>,
    #[serde(default = "default_cycles")]
    pub cycles: u32,
    #[serde(default = "default_k")]
    pub sequences_per_structure: u32,
    #[serde(default = "default_r")]
    pub retry_limit: u32,
    pub policy: Policy,
    #[serde(default)]
    pub parent: Option<PipelineId>,
    #[serde(default)]
    pub generation_params: BTreeMap<String, String>,
    /// Run at most one task of this pipeline at a time.
    #[serde(default)]
    pub sequential: bool,
    /// Lane whose result this sub-pipeline re-processes.
    #[serde(default)]
    pub reprocesses: Option<LaneRef>,
}

impl PipelineSpec {
    pub fn new(id: impl Into<String>, input_structures: Vec<ProteinStructure>, policy: Policy) -> Self {
        Self {
            id: PipelineId::new(id),
            input_structures,
            cycles: default_cycles(),
            sequences_per_structure: default_k(),
            retry_limit: default_r(),
            policy,
            parent: None,
            generation_params: BTreeMap::new(),
            sequential: false,
            reprocesses: None,
        }
    }

    pub fn validate(&self, pae_max: f64) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidSpec(m));
        let id = self.id.as_str();
        if id.is_empty()
            || !id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
        {
            return bad(format!("pipeline id {id:?} must be non-empty [A-Za-z0-9_.-]"));
        }
        if self.input_structures.is_empty() {
            return bad(format!("pipeline {id} has no input structures"));
        }
        if self.cycles < 1 {
            return bad("cycles must be >= 1".into());
        }
        if self.sequences_per_structure < 1 {
            return bad("sequences_per_structure must be >= 1".into());
        }
        if self.parent.as_ref() == Some(&self.id) {
            return bad(format!("pipeline {id} cannot be its own parent"));
        }
        for s in &self.input_structures {
            s.validate(pae_max)?;
        }
        Ok(())
    }
}

/// Run-level settings every pipeline shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub weights: ScoreWeights,
    pub pae_max: f64,
    /// When false the last cycle behaves like the control policy.
    pub final_cycle_adaptive: bool,
    pub seed: u64,
    pub profiles: TaskProfiles,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            pae_max: DEFAULT_PAE_MAX,
            final_cycle_adaptive: true,
            seed: 0,
            profiles: TaskProfiles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    RetryBudgetExhausted,
    BatchExhausted,
    TaskFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneStatus {
    GeneratingSequences,
    AwaitingPrediction,
    Deciding,
    Advancing,
    Terminated(TerminationReason),
    Completed,
}

impl LaneStatus {
    pub fn is_absorbing(&self) -> bool {
        matches!(self, LaneStatus::Terminated(_) | LaneStatus::Completed)
    }
}

/// One accepted design step of a lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedStep {
    pub cycle: u32,
    pub structure: StructureId,
    pub sequence: crate::domain::SequenceId,
    pub metrics: QualityMetrics,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneState {
    pub index: u32,
    /// Id of the structure this lane started from.
    pub lineage: StructureId,
    pub current_structure: ProteinStructure,
    pub cycle: u32,
    pub ranked_batch: Vec<CandidateSequence>,
    /// 1-based rank a retry would evaluate next.
    pub next_rank_to_try: u32,
    pub retries_this_cycle: u32,
    pub last_accepted_metrics: Option<QualityMetrics>,
    pub history: Vec<AcceptedStep>,
    pub final_candidate: Option<ProteinStructure>,
    pub status: LaneStatus,
    pub pending_task: Option<TaskId>,
    pub evaluations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionOutcome {
    Accept(ProteinStructure),
    Retry(CandidateSequence),
    TerminateLane(TerminationReason),
    CompleteLane(ProteinStructure),
}

impl DecisionOutcome {
    pub fn kind(&self) -> DecisionKind {
        match self {
            DecisionOutcome::Accept(_) => DecisionKind::Accept,
            DecisionOutcome::Retry(_) => DecisionKind::Retry,
            DecisionOutcome::TerminateLane(_) => DecisionKind::TerminateLane,
            DecisionOutcome::CompleteLane(_) => DecisionKind::CompleteLane,
        }
    }
}

/// Side effects requested by a transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    SubmitTask(TaskSpec),
    RecordTrajectory(TrajectoryRecord),
    Decision {
        lane: u32,
        cycle: u32,
        kind: DecisionKind,
    },
    LaneFinished {
        lane: u32,
        status: LaneStatus,
    },
    PipelineCompleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PipelineEvent {
    TaskCompleted(TaskResult),
}

pub fn generation_task_id(pipeline: &PipelineId, lane: u32, cycle: u32) -> TaskId {
    TaskId::new(format!("{pipeline}/L{lane}/c{cycle}/gen"))
}

pub fn prediction_task_id(pipeline: &PipelineId, lane: u32, cycle: u32, retry: u32) -> TaskId {
    TaskId::new(format!("{pipeline}/L{lane}/c{cycle}/pred{retry}"))
}

/// Stage 1 task: generate `K` sequences conditioned on `structure`.
pub fn build_generation_task(
    structure: &ProteinStructure,
    spec: &PipelineSpec,
    lane: u32,
    cycle: u32,
    profiles: &TaskProfiles,
) -> TaskSpec {
    TaskSpec::new(
        generation_task_id(&spec.id, lane, cycle),
        TaskKind::SequenceGeneration,
        profiles.generation.clone(),
        TaskPayload::Generation {
            structure: structure.clone(),
            num_sequences: spec.sequences_per_structure,
            params: spec.generation_params.clone(),
        },
        Provenance {
            pipeline: spec.id.clone(),
            lane,
            cycle,
            retry: 0,
        },
    )
}

/// Stage 4 task: predict the structure of one selected sequence.
pub fn build_prediction_task(
    sequence: &CandidateSequence,
    spec: &PipelineSpec,
    lane: u32,
    cycle: u32,
    retry: u32,
    profiles: &TaskProfiles,
) -> TaskSpec {
    TaskSpec::new(
        prediction_task_id(&spec.id, lane, cycle, retry),
        TaskKind::StructurePrediction,
        profiles.prediction.clone(),
        TaskPayload::Prediction {
            sequence: sequence.clone(),
        },
        Provenance {
            pipeline: spec.id.clone(),
            lane,
            cycle,
            retry,
        },
    )
}

/// Everything `decide` needs beyond the lane itself.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub policy: Policy,
    pub weights: &'a ScoreWeights,
    pub pae_max: f64,
    pub cycles: u32,
    pub sequences_per_structure: u32,
    pub retry_limit: u32,
    pub final_cycle_adaptive: bool,
}

impl DecisionContext<'_> {
    /// Whether selection and gating apply in `cycle`.
    pub fn adaptive_in(&self, cycle: u32) -> bool {
        self.policy == Policy::Adaptive && (self.final_cycle_adaptive || cycle < self.cycles)
    }
}

/// Keep, retry, or stop after evaluating `predicted`.
pub fn decide(
    lane: &LaneState,
    ctx: &DecisionContext<'_>,
    new_metrics: &QualityMetrics,
    predicted: &ProteinStructure,
) -> Result<DecisionOutcome, ProtocolError> {
    if lane.status != LaneStatus::Deciding {
        return Err(ProtocolError::State(format!(
            "lane {} asked to decide while {:?}",
            lane.index, lane.status
        )));
    }
    if predicted.metrics.as_ref() != Some(new_metrics) {
        return Err(ProtocolError::State(format!(
            "structure {} does not carry the metrics being judged",
            predicted.id
        )));
    }
    new_metrics.validate(ctx.pae_max)?;
    let accept = match (&lane.last_accepted_metrics, ctx.adaptive_in(lane.cycle)) {
        (_, false) | (None, true) => true,
        (Some(prev), true) => improved(prev, new_metrics, ctx.weights, ctx.pae_max)?,
    };
    if accept {
        return Ok(if lane.cycle >= ctx.cycles {
            DecisionOutcome::CompleteLane(predicted.clone())
        } else {
            DecisionOutcome::Accept(predicted.clone())
        });
    }
    if lane.retries_this_cycle >= ctx.retry_limit {
        return Ok(DecisionOutcome::TerminateLane(
            TerminationReason::RetryBudgetExhausted,
        ));
    }
    if lane.next_rank_to_try > ctx.sequences_per_structure {
        return Ok(DecisionOutcome::TerminateLane(TerminationReason::BatchExhausted));
    }
    let next = lane
        .ranked_batch
        .iter()
        .find(|s| s.rank == lane.next_rank_to_try)
        .cloned()
        .ok_or_else(|| {
            ProtocolError::State(format!(
                "lane {} has no sequence of rank {}",
                lane.index, lane.next_rank_to_try
            ))
        })?;
    Ok(DecisionOutcome::Retry(next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub spec: PipelineSpec,
    pub params: ProtocolParams,
    pub lanes: Vec<LaneState>,
}

impl PipelineState {
    /// Creates every lane and the initial generation tasks.
    pub fn start(
        spec: PipelineSpec,
        params: ProtocolParams,
    ) -> Result<(PipelineState, Vec<Action>), ProtocolError> {
        spec.validate(params.pae_max)?;
        params.weights.validate()?;
        let mut lanes = Vec::with_capacity(spec.input_structures.len());
        let mut actions = Vec::new();
        for (i, structure) in spec.input_structures.iter().enumerate() {
            let index = i as u32;
            let task = build_generation_task(structure, &spec, index, 1, &params.profiles);
            // A structure that already carries metrics is the baseline to beat.
            let baseline = structure.metrics;
            lanes.push(LaneState {
                index,
                lineage: structure.id.clone(),
                current_structure: structure.clone(),
                cycle: 1,
                ranked_batch: Vec::new(),
                next_rank_to_try: 1,
                retries_this_cycle: 0,
                last_accepted_metrics: baseline,
                history: Vec::new(),
                final_candidate: baseline.map(|_| structure.clone()),
                status: LaneStatus::GeneratingSequences,
                pending_task: Some(task.id.clone()),
                evaluations: 0,
            });
            actions.push(Action::SubmitTask(task));
        }
        Ok((PipelineState { spec, params, lanes }, actions))
    }

    pub fn id(&self) -> &PipelineId {
        &self.spec.id
    }

    pub fn is_complete(&self) -> bool {
        self.lanes.iter().all(|l| l.status.is_absorbing())
    }

    pub fn owns_task(&self, task: &TaskId) -> bool {
        self.lanes.iter().any(|l| l.pending_task.as_ref() == Some(task))
    }

    fn context(&self) -> DecisionContext<'_> {
        DecisionContext {
            policy: self.spec.policy,
            weights: &self.params.weights,
            pae_max: self.params.pae_max,
            cycles: self.spec.cycles,
            sequences_per_structure: self.spec.sequences_per_structure,
            retry_limit: self.spec.retry_limit,
            final_cycle_adaptive: self.params.final_cycle_adaptive,
        }
    }

    /// Pure transition on one event.
    pub fn advance(
        &self,
        event: &PipelineEvent,
    ) -> Result<(PipelineState, Vec<Action>), ProtocolError> {
        let PipelineEvent::TaskCompleted(result) = event;
        if self.is_complete() {
            return Err(ProtocolError::State(format!(
                "pipeline {} is already complete",
                self.spec.id
            )));
        }
        let lane_idx = self
            .lanes
            .iter()
            .position(|l| l.pending_task.as_ref() == Some(&result.task_id))
            .ok_or_else(|| ProtocolError::UnknownTask(result.task_id.clone()))?;

        let mut next = self.clone();
        let mut actions = Vec::new();
        next.step_lane(lane_idx, result, &mut actions)?;
        if next.is_complete() {
            actions.push(Action::PipelineCompleted);
        }
        Ok((next, actions))
    }

    fn step_lane(
        &mut self,
        idx: usize,
        result: &TaskResult,
        actions: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        self.lanes[idx].pending_task = None;
        if let TaskStatus::Failed(reason) = &result.status {
            self.terminate(idx, TerminationReason::TaskFailed(reason.clone()), actions);
            return Ok(());
        }
        let status = self.lanes[idx].status.clone();
        match (status, &result.outputs) {
            (LaneStatus::GeneratingSequences, Some(TaskOutputs::Sequences(batch))) => {
                self.on_sequences(idx, batch, &result.task_id, actions)
            }
            (LaneStatus::AwaitingPrediction, Some(TaskOutputs::Prediction { structure, metrics })) => {
                self.on_prediction(idx, &result.task_id, structure, metrics, actions)
            }
            (status, outputs) => Err(ProtocolError::State(format!(
                "lane {idx} in {status:?} cannot consume {}",
                match outputs {
                    Some(TaskOutputs::Sequences(_)) => "a sequence batch",
                    Some(TaskOutputs::Prediction { .. }) => "a prediction",
                    None => "an empty result",
                }
            ))),
        }
    }

    fn on_sequences(
        &mut self,
        idx: usize,
        batch: &[CandidateSequence],
        task_id: &TaskId,
        actions: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        let k = self.spec.sequences_per_structure as usize;
        if batch.len() != k {
            let reason = format!("expected {k} sequences, got {}", batch.len());
            self.terminate(idx, TerminationReason::TaskFailed(reason), actions);
            return Ok(());
        }
        if let Some(err) = batch.iter().find_map(|s| s.validate().err()) {
            self.terminate(idx, TerminationReason::TaskFailed(err.to_string()), actions);
            return Ok(());
        }
        let ranked = rank_sequences(batch.to_vec())?;
        let adaptive = self.context().adaptive_in(self.lanes[idx].cycle);
        let chosen = if adaptive {
            0
        } else {
            let label = format!("pick/{task_id}");
            seed_stream(self.params.seed, &label).random_range(0..ranked.len())
        };
        let selected = ranked[chosen].clone();
        let lane = &mut self.lanes[idx];
        lane.ranked_batch = ranked;
        lane.next_rank_to_try = selected.rank + 1;
        lane.retries_this_cycle = 0;
        lane.status = LaneStatus::AwaitingPrediction;
        let task = build_prediction_task(
            &selected,
            &self.spec,
            lane.index,
            lane.cycle,
            0,
            &self.params.profiles,
        );
        lane.pending_task = Some(task.id.clone());
        actions.push(Action::SubmitTask(task));
        Ok(())
    }

    fn on_prediction(
        &mut self,
        idx: usize,
        task_id: &TaskId,
        structure: &ProteinStructure,
        metrics: &QualityMetrics,
        actions: &mut Vec<Action>,
    ) -> Result<(), ProtocolError> {
        if let Err(e) = structure.validate(self.params.pae_max) {
            self.terminate(idx, TerminationReason::TaskFailed(e.to_string()), actions);
            return Ok(());
        }
        self.lanes[idx].status = LaneStatus::Deciding;
        let outcome = decide(&self.lanes[idx], &self.context(), metrics, structure)?;
        let score = composite_score(metrics, &self.params.weights, self.params.pae_max)?;
        let lane = &mut self.lanes[idx];
        lane.evaluations += 1;
        let sequence = match &structure.origin {
            crate::domain::StructureOrigin::Predicted { sequence_id, .. } => sequence_id.clone(),
            crate::domain::StructureOrigin::Initial => {
                return Err(ProtocolError::State(format!(
                    "prediction returned initial structure {}",
                    structure.id
                )))
            }
        };
        actions.push(Action::RecordTrajectory(TrajectoryRecord {
            trajectory_id: task_id.to_string(),
            pipeline_id: self.spec.id.clone(),
            lane: lane.index,
            structure_lineage: lane.lineage.clone(),
            cycle: lane.cycle,
            sequence: sequence.clone(),
            metrics: *metrics,
            score,
            decision: outcome.kind(),
        }));
        actions.push(Action::Decision {
            lane: lane.index,
            cycle: lane.cycle,
            kind: outcome.kind(),
        });
        let accept = |lane: &mut LaneState, s: &ProteinStructure| {
            lane.history.push(AcceptedStep {
                cycle: lane.cycle,
                structure: s.id.clone(),
                sequence: sequence.clone(),
                metrics: *metrics,
                score,
            });
            lane.last_accepted_metrics = Some(*metrics);
            lane.final_candidate = Some(s.clone());
            lane.current_structure = s.clone();
        };
        match outcome {
            DecisionOutcome::Accept(s) => {
                accept(lane, &s);
                lane.status = LaneStatus::Advancing;
                lane.cycle += 1;
                lane.retries_this_cycle = 0;
                lane.ranked_batch.clear();
                let task = build_generation_task(
                    &s,
                    &self.spec,
                    lane.index,
                    lane.cycle,
                    &self.params.profiles,
                );
                lane.pending_task = Some(task.id.clone());
                lane.status = LaneStatus::GeneratingSequences;
                actions.push(Action::SubmitTask(task));
            }
            DecisionOutcome::CompleteLane(s) => {
                accept(lane, &s);
                lane.status = LaneStatus::Completed;
                actions.push(Action::LaneFinished {
                    lane: lane.index,
                    status: LaneStatus::Completed,
                });
            }
            DecisionOutcome::Retry(seq) => {
                lane.retries_this_cycle += 1;
                lane.next_rank_to_try = seq.rank + 1;
                lane.status = LaneStatus::AwaitingPrediction;
                let task = build_prediction_task(
                    &seq,
                    &self.spec,
                    lane.index,
                    lane.cycle,
                    lane.retries_this_cycle,
                    &self.params.profiles,
                );
                lane.pending_task = Some(task.id.clone());
                actions.push(Action::SubmitTask(task));
            }
            DecisionOutcome::TerminateLane(reason) => self.terminate(idx, reason, actions),
        }
        Ok(())
    }

    fn terminate(&mut self, idx: usize, reason: TerminationReason, actions: &mut Vec<Action>) {
        let lane = &mut self.lanes[idx];
        lane.pending_task = None;
        lane.status = LaneStatus::Terminated(reason);
        actions.push(Action::LaneFinished {
            lane: lane.index,
            status: lane.status.clone(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{SequenceId, StructurePayload};

    fn structure(id: &str) -> ProteinStructure {
        ProteinStructure::initial(id, StructurePayload::Synthetic { fitness: 0.5 })
    }

    fn spec(policy: Policy, k: u32, r: u32, m: u32) -> PipelineSpec {
        PipelineSpec {
            sequences_per_structure: k,
            retry_limit: r,
            cycles: m,
            ..PipelineSpec::new("p", vec![structure("s1")], policy)
        }
    }

    fn batch(task: &TaskSpec, k: u32) -> TaskResult {
        let seqs = (0..k)
            .map(|i| CandidateSequence {
                id: SequenceId::new(format!("{}.s{:03}", task.id, i + 1)),
                residues: "MKV".into(),
                log_likelihood: -(i as f64) * 0.1,
                source_structure: "s1".into(),
                rank: 0,
                latent_quality: None,
            })
            .collect();
        TaskResult::succeeded(task.id.clone(), TaskOutputs::Sequences(seqs))
    }

    fn prediction(task: &TaskSpec, m: QualityMetrics) -> TaskResult {
        let TaskPayload::Prediction { sequence } = &task.payload else {
            panic!("not a prediction task")
        };
        let s = ProteinStructure::predicted(
            format!("{}.model", sequence.id),
            StructurePayload::Synthetic { fitness: 0.5 },
            task.provenance.cycle,
            sequence.id.clone(),
            m,
        );
        TaskResult::succeeded(task.id.clone(), TaskOutputs::Prediction { structure: s, metrics: m })
    }

    fn submitted(actions: &[Action]) -> Vec<TaskSpec> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::SubmitTask(t) => Some(t.clone()),
                _ => None,
            })
            .collect()
    }

    fn step(state: &PipelineState, result: TaskResult) -> (PipelineState, Vec<Action>) {
        state.advance(&PipelineEvent::TaskCompleted(result)).unwrap()
    }

    fn m(plddt: f64) -> QualityMetrics {
        QualityMetrics::new(plddt, 0.5, 10.0)
    }

    #[test]
    fn generation_task_shape() {
        let sp = spec(Policy::Adaptive, 10, 10, 4);
        let t = build_generation_task(&sp.input_structures[0], &sp, 2, 3, &TaskProfiles::default());
        assert_eq!(t.kind, TaskKind::SequenceGeneration);
        assert_eq!((t.gpus, t.cpu_cores), (1, 1));
        assert_eq!(t.provenance.lane, 2);
        assert_eq!(t.provenance.cycle, 3);
        assert_eq!(t.provenance.pipeline.as_str(), "p");
        match &t.payload {
            TaskPayload::Generation {
                structure,
                num_sequences,
                ..
            } => {
                assert_eq!(structure.id.as_str(), "s1");
                assert_eq!(*num_sequences, 10);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn generation_chains_to_rank_one_prediction() {
        let (st, acts) = PipelineState::start(spec(Policy::Adaptive, 10, 10, 4), ProtocolParams::default()).unwrap();
        let gen = &submitted(&acts)[0];
        let (st, acts) = step(&st, batch(gen, 10));
        let tasks = submitted(&acts);
        assert_eq!(tasks.len(), 1);
        match &tasks[0].payload {
            TaskPayload::Prediction { sequence } => assert_eq!(sequence.rank, 1),
            _ => panic!(),
        }
        assert_eq!(st.lanes[0].status, LaneStatus::AwaitingPrediction);
    }

    #[test]
    fn wrong_batch_size_terminates_lane() {
        let (st, acts) = PipelineState::start(spec(Policy::Adaptive, 1, 10, 4), ProtocolParams::default()).unwrap();
        let (st, _) = step(&st, batch(&submitted(&acts)[0], 2));
        assert!(matches!(st.lanes[0].status, LaneStatus::Terminated(TerminationReason::TaskFailed(_))));
    }

    #[test]
    fn accept_starts_next_cycle_from_predicted_structure() {
        let (st, acts) = PipelineState::start(spec(Policy::Adaptive, 10, 10, 4), ProtocolParams::default()).unwrap();
        let (st, acts) = step(&st, batch(&submitted(&acts)[0], 10));
        let pred = submitted(&acts)[0].clone();
        let (st, acts) = step(&st, prediction(&pred, m(70.0)));
        let next = submitted(&acts);
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].kind, TaskKind::SequenceGeneration);
        match &next[0].payload {
            TaskPayload::Generation { structure, .. } => {
                assert_eq!(structure.id.as_str(), format!("{}.s001.model", "p/L0/c1/gen"));
            }
            _ => panic!(),
        }
        assert_eq!(st.lanes[0].cycle, 2);
        assert_eq!(st.lanes[0].last_accepted_metrics, Some(m(70.0)));
    }

    /// Drives a single lane with a fixed metric script for its predictions.
    fn drive(sp: PipelineSpec, params: ProtocolParams, script: impl Fn(u32, u32) -> QualityMetrics) -> (PipelineState, Vec<Action>) {
        let (mut st, acts) = PipelineState::start(sp.clone(), params).unwrap();
        let mut all = acts.clone();
        let mut queue = submitted(&acts);
        while let Some(t) = queue.pop() {
            let res = match t.kind {
                TaskKind::SequenceGeneration => batch(&t, sp.sequences_per_structure),
                TaskKind::StructurePrediction => prediction(&t, script(t.provenance.cycle, t.provenance.retry)),
            };
            let (next, acts) = step(&st, res);
            st = next;
            queue.extend(submitted(&acts));
            all.extend(acts);
        }
        (st, all)
    }

    fn trajectories(actions: &[Action]) -> Vec<TrajectoryRecord> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::RecordTrajectory(r) => Some(r.clone()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn control_always_accepts() {
        let (st, acts) = drive(spec(Policy::Control, 10, 10, 4), ProtocolParams::default(), |c, _| m(90.0 - c as f64 * 10.0));
        assert_eq!(st.lanes[0].status, LaneStatus::Completed);
        let t = trajectories(&acts);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|r| r.decision.is_acceptance()));
        assert_eq!(t.last().unwrap().decision, DecisionKind::CompleteLane);
    }

    #[test]
    fn ten_declines_exhaust_the_retry_budget() {
        // Cycle 1 sets the baseline; every later prediction is worse.
        let (st, acts) = drive(spec(Policy::Adaptive, 12, 10, 4), ProtocolParams::default(), |c, _| {
            if c == 1 { m(80.0) } else { m(60.0) }
        });
        assert_eq!(
            st.lanes[0].status,
            LaneStatus::Terminated(TerminationReason::RetryBudgetExhausted)
        );
        let t = trajectories(&acts);
        let cycle2: Vec<_> = t.iter().filter(|r| r.cycle == 2).collect();
        assert_eq!(cycle2.len(), 11);
        assert_eq!(cycle2.iter().filter(|r| r.decision == DecisionKind::Retry).count(), 10);
        assert_eq!(cycle2.last().unwrap().decision, DecisionKind::TerminateLane);
    }

    #[test]
    fn small_batch_exhausts_before_budget() {
        let (st, acts) = drive(spec(Policy::Adaptive, 5, 10, 4), ProtocolParams::default(), |c, _| {
            if c == 1 { m(80.0) } else { m(60.0) }
        });
        assert_eq!(st.lanes[0].status, LaneStatus::Terminated(TerminationReason::BatchExhausted));
        assert_eq!(trajectories(&acts).iter().filter(|r| r.cycle == 2).count(), 5);
    }

    #[test]
    fn retries_use_consecutive_ranks() {
        let (_, acts) = drive(spec(Policy::Adaptive, 12, 10, 4), ProtocolParams::default(), |c, _| {
            if c == 1 { m(80.0) } else { m(60.0) }
        });
        let ranks: Vec<u32> = acts
            .iter()
            .filter_map(|a| match a {
                Action::SubmitTask(TaskSpec { payload: TaskPayload::Prediction { sequence }, provenance, .. }) if provenance.cycle == 2 => Some(sequence.rank),
                _ => None,
            })
            .collect();
        assert_eq!(ranks, (1..=11).collect::<Vec<_>>());
    }

    #[test]
    fn retry_success_resets_budget_on_next_cycle() {
        // Two declines then an improvement in cycle 2; cycle 3 may again use the full budget.
        let (st, acts) = drive(spec(Policy::Adaptive, 20, 10, 3), ProtocolParams::default(), |c, r| match (c, r) {
            (1, _) => m(50.0),
            (2, 0..=1) => m(40.0),
            (2, _) => m(60.0),
            (_, 0..=9) => m(55.0),
            _ => m(70.0),
        });
        assert_eq!(st.lanes[0].status, LaneStatus::Completed);
        assert_eq!(trajectories(&acts).iter().filter(|r| r.cycle == 3).count(), 11);
    }

    #[test]
    fn final_cycle_without_adaptivity_accepts_declines() {
        let params = ProtocolParams { final_cycle_adaptive: false, ..ProtocolParams::default() };
        let (st, acts) = drive(spec(Policy::Adaptive, 10, 10, 2), params, |c, _| if c == 1 { m(80.0) } else { m(20.0) });
        assert_eq!(st.lanes[0].status, LaneStatus::Completed);
        assert_eq!(trajectories(&acts).len(), 2);
    }

    #[test]
    fn decide_requires_deciding_status() {
        let (st, _) = PipelineState::start(spec(Policy::Adaptive, 10, 10, 4), ProtocolParams::default()).unwrap();
        let lane = &st.lanes[0];
        let s = ProteinStructure::predicted("x", StructurePayload::Inline(vec![]), 1, "q".into(), m(50.0));
        let err = decide(lane, &st.context(), &m(50.0), &s).unwrap_err();
        assert!(matches!(err, ProtocolError::State(_)));
    }

    #[test]
    fn first_adaptive_evaluation_is_accepted() {
        let (mut st, _) = PipelineState::start(spec(Policy::Adaptive, 10, 10, 4), ProtocolParams::default()).unwrap();
        st.lanes[0].status = LaneStatus::Deciding;
        let s = ProteinStructure::predicted("x", StructurePayload::Inline(vec![]), 1, "q".into(), m(5.0));
        let out = decide(&st.lanes[0], &st.context(), &m(5.0), &s).unwrap();
        assert!(matches!(out, DecisionOutcome::Accept(_)));
    }

    #[test]
    fn unknown_task_and_absorbing_errors() {
        let (st, _) = PipelineState::start(spec(Policy::Control, 1, 0, 1), ProtocolParams::default()).unwrap();
        let bogus = TaskResult::failed(TaskId::new("nope"), "x");
        assert!(matches!(
            st.advance(&PipelineEvent::TaskCompleted(bogus)),
            Err(ProtocolError::UnknownTask(_))
        ));
        let (done, _) = drive(spec(Policy::Control, 1, 0, 1), ProtocolParams::default(), |_, _| m(50.0));
        assert!(done.is_complete());
        let again = TaskResult::failed(TaskId::new("p/L0/c1/pred0"), "x");
        assert!(matches!(done.advance(&PipelineEvent::TaskCompleted(again)), Err(ProtocolError::State(_))));
    }

    #[test]
    fn failures_terminate_the_lane() {
        let (st, acts) = PipelineState::start(spec(Policy::Adaptive, 3, 1, 2), ProtocolParams::default()).unwrap();
        let gen = &submitted(&acts)[0];
        let (st, acts) = step(&st, TaskResult::failed(gen.id.clone(), "exit 1"));
        assert_eq!(st.lanes[0].status, LaneStatus::Terminated(TerminationReason::TaskFailed("exit 1".into())));
        assert!(acts.contains(&Action::PipelineCompleted));
    }

    #[test]
    fn advance_is_pure() {
        let (st, acts) = PipelineState::start(spec(Policy::Adaptive, 4, 2, 2), ProtocolParams::default()).unwrap();
        let snapshot = st.clone();
        let ev = PipelineEvent::TaskCompleted(batch(&submitted(&acts)[0], 4));
        let a = st.advance(&ev).unwrap();
        let b = st.advance(&ev).unwrap();
        assert_eq!(a, b);
        assert_eq!(st, snapshot);
    }

    #[test]
    fn spec_validation() {
        let mut sp = spec(Policy::Adaptive, 10, 10, 4);
        sp.input_structures.clear();
        assert!(sp.validate(31.75).is_err());
        let mut sp = spec(Policy::Adaptive, 0, 10, 4);
        assert!(sp.validate(31.75).is_err());
        sp.sequences_per_structure = 1;
        sp.parent = Some(sp.id.clone());
        assert!(sp.validate(31.75).is_err());
        sp.parent = None;
        sp.id = PipelineId::new("bad id");
        assert!(sp.validate(31.75).is_err());
    }

    #[test]
    fn predicted_input_sets_the_baseline() {
        let input = ProteinStructure::predicted("prev", StructurePayload::Synthetic { fitness: 0.5 }, 4, "z".into(), m(80.0));
        let sp = PipelineSpec { sequences_per_structure: 11, ..PipelineSpec::new("sub", vec![input], Policy::Adaptive) };
        let (st, acts) = drive(sp, ProtocolParams::default(), |_, _| m(70.0));
        assert_eq!(st.lanes[0].status, LaneStatus::Terminated(TerminationReason::RetryBudgetExhausted));
        assert_eq!(trajectories(&acts).len(), 11);
        assert_eq!(st.lanes[0].final_candidate.as_ref().unwrap().id.as_str(), "prev");
    }
}
