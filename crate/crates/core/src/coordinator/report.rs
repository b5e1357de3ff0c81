//! The machine-readable run summary.

use serde::{Deserialize, Serialize};

use crate::domain::{
    composite_score, summarize, PipelineId, QualityMetrics, SequenceId, StructureId, Summary,
    TrajectoryRecord,
};
use crate::protocol::{AcceptedStep, LaneStatus, Policy};
use crate::scheduler::{utilization, ScheduledEvent, SchedulerError};
use crate::telemetry::{makespan, metric_series, CyclePoint, MakespanBreakdown, TelemetryError};
use crate::time::Time;

use super::Coordinator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub pipelines: usize,
    pub sub_pipelines: usize,
    pub lanes: usize,
    pub completed_lanes: usize,
    pub terminated_lanes: usize,
    pub trajectories: usize,
    pub evaluations: u64,
}

/// Median over lanes of the last accepted value minus the median of the
/// first accepted value. Lanes that never accepted are left out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetDeltas {
    pub lanes: usize,
    pub plddt: f64,
    pub ptm: f64,
    pub iface_pae: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub n: usize,
    pub plddt: Summary,
    pub ptm: Summary,
    pub iface_pae: Summary,
    pub score: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub cpu_pct: f64,
    pub gpu_pct: f64,
    pub cpu_cores_total: u32,
    pub gpus_total: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalCandidate {
    pub structure: StructureId,
    pub sequence: Option<SequenceId>,
    pub metrics: QualityMetrics,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneReport {
    pub lane: u32,
    pub lineage: StructureId,
    pub status: LaneStatus,
    pub evaluations: u32,
    pub final_candidate: Option<FinalCandidate>,
    pub history: Vec<AcceptedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub id: PipelineId,
    pub parent: Option<PipelineId>,
    pub policy: Policy,
    pub cycles: u32,
    pub lanes: Vec<LaneReport>,
}

/// Field order is stable: headline numbers first, details last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub counts: Counts,
    pub net_deltas: Option<NetDeltas>,
    pub final_summary: Option<FinalSummary>,
    pub utilization: UtilizationReport,
    pub makespan: MakespanBreakdown,
    pub per_cycle: Vec<CyclePoint>,
    pub pipelines: Vec<PipelineReport>,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl RunReport {
    /// Median composite score of final candidates.
    pub fn final_score_median(&self) -> Option<f64> {
        self.final_summary.map(|s| s.score.median)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

fn median(values: &[f64]) -> f64 {
    summarize(values).map(|s| s.median).unwrap_or(0.0)
}

impl Coordinator {
    pub fn report(
        &self,
        events: &[ScheduledEvent],
        cpu_cores_total: u32,
        gpus_total: u32,
    ) -> Result<RunReport, ReportError> {
        let cfg = self.config();
        let score = |m: &QualityMetrics| composite_score(m, &cfg.weights, cfg.pae_max).unwrap_or(f64::NAN);

        let mut pipelines = Vec::new();
        let mut firsts: Vec<&AcceptedStep> = Vec::new();
        let mut lasts: Vec<&AcceptedStep> = Vec::new();
        let mut finals: Vec<QualityMetrics> = Vec::new();
        let mut counts = Counts {
            pipelines: 0,
            sub_pipelines: 0,
            lanes: 0,
            completed_lanes: 0,
            terminated_lanes: 0,
            trajectories: self.ledger().len(),
            evaluations: 0,
        };
        for p in self.pipelines() {
            if p.spec.parent.is_some() {
                counts.sub_pipelines += 1;
            } else {
                counts.pipelines += 1;
            }
            let mut lanes = Vec::new();
            for l in &p.lanes {
                counts.lanes += 1;
                counts.evaluations += l.evaluations as u64;
                match l.status {
                    LaneStatus::Completed => counts.completed_lanes += 1,
                    LaneStatus::Terminated(_) => counts.terminated_lanes += 1,
                    _ => {}
                }
                if let (Some(f), Some(last)) = (l.history.first(), l.history.last()) {
                    firsts.push(f);
                    lasts.push(last);
                }
                let final_candidate = l.final_candidate.as_ref().and_then(|s| {
                    let metrics = s.metrics?;
                    finals.push(metrics);
                    Some(FinalCandidate {
                        structure: s.id.clone(),
                        sequence: match &s.origin {
                            crate::domain::StructureOrigin::Predicted { sequence_id, .. } => {
                                Some(sequence_id.clone())
                            }
                            crate::domain::StructureOrigin::Initial => None,
                        },
                        metrics,
                        score: score(&metrics),
                    })
                });
                lanes.push(LaneReport {
                    lane: l.index,
                    lineage: l.lineage.clone(),
                    status: l.status.clone(),
                    evaluations: l.evaluations,
                    final_candidate,
                    history: l.history.clone(),
                });
            }
            pipelines.push(PipelineReport {
                id: p.spec.id.clone(),
                parent: p.spec.parent.clone(),
                policy: p.spec.policy,
                cycles: p.spec.cycles,
                lanes,
            });
        }

        let net_deltas = (!firsts.is_empty()).then(|| {
            let delta = |f: fn(&AcceptedStep) -> f64| {
                median(&lasts.iter().map(|s| f(s)).collect::<Vec<_>>())
                    - median(&firsts.iter().map(|s| f(s)).collect::<Vec<_>>())
            };
            NetDeltas {
                lanes: firsts.len(),
                plddt: delta(|s| s.metrics.plddt),
                ptm: delta(|s| s.metrics.ptm),
                iface_pae: delta(|s| s.metrics.iface_pae),
                score: delta(|s| s.score),
            }
        });

        let final_summary = if finals.is_empty() {
            None
        } else {
            let col = |f: fn(&QualityMetrics) -> f64| {
                summarize(&finals.iter().map(f).collect::<Vec<_>>()).map_err(TelemetryError::from)
            };
            let scores: Vec<f64> = finals.iter().map(score).collect();
            Some(FinalSummary {
                n: finals.len(),
                plddt: col(|m| m.plddt)?,
                ptm: col(|m| m.ptm)?,
                iface_pae: col(|m| m.iface_pae)?,
                score: summarize(&scores).map_err(TelemetryError::from)?,
            })
        };

        let makespan = makespan(events)?;
        let end = events.iter().map(|e| e.time).max().unwrap_or(Time::ZERO);
        let util = utilization(events, cpu_cores_total, gpus_total, (Time::ZERO, end))?;
        let per_cycle = if self.ledger().is_empty() {
            Vec::new()
        } else {
            metric_series(self.ledger())?.points
        };

        Ok(RunReport {
            seed: cfg.seed,
            counts,
            net_deltas,
            final_summary,
            utilization: UtilizationReport {
                cpu_pct: util.cpu_pct,
                gpu_pct: util.gpu_pct,
                cpu_cores_total,
                gpus_total,
            },
            makespan,
            per_cycle,
            pipelines,
            trajectories: self.ledger().to_vec(),
        })
    }
}
