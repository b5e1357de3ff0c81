//! Value types shared by every layer: predicted-structure quality metrics,
//! candidate sequences, structures, trajectory records, and the scalar
//! scoring and statistics helpers built on them.

use std::cmp::Ordering;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default upper bound of the interchain predicted aligned error.
pub const DEFAULT_PAE_MAX: f64 = 31.75;

/// The 20 canonical one-letter amino-acid codes.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("metric `{field}` = {value} is outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
    #[error("invalid residue {residue:?} at position {position}")]
    InvalidResidue { residue: char, position: usize },
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifier of a candidate sequence. Doubles as its FASTA header.
    SequenceId
);
string_id!(StructureId);
string_id!(PipelineId);
string_id!(TaskId);

/// Confidence triple attached to every predicted structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// Per-residue confidence, 0..=100, higher is better.
    pub plddt: f64,
    /// Predicted TM-score, 0..=1, higher is better.
    pub ptm: f64,
    /// Interchain predicted aligned error, 0..=pae_max, lower is better.
    pub iface_pae: f64,
}

impl QualityMetrics {
    pub fn new(plddt: f64, ptm: f64, iface_pae: f64) -> Self {
        Self {
            plddt,
            ptm,
            iface_pae,
        }
    }

    pub fn validate(&self, pae_max: f64) -> Result<(), DomainError> {
        check_range("plddt", self.plddt, 100.0)?;
        check_range("ptm", self.ptm, 1.0)?;
        check_range("iface_pae", self.iface_pae, pae_max)
    }
}

fn check_range(field: &'static str, value: f64, max: f64) -> Result<(), DomainError> {
    if !value.is_finite() || !(0.0..=max).contains(&value) {
        return Err(DomainError::OutOfRange {
            field,
            value,
            min: 0.0,
            max,
        });
    }
    Ok(())
}

/// Weights of the composite quality score and the margin a new score must
/// clear to count as an improvement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub w_plddt: f64,
    pub w_ptm: f64,
    pub w_pae: f64,
    pub epsilon: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_plddt: 1.0,
            w_ptm: 1.0,
            w_pae: 1.0,
            epsilon: 0.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), DomainError> {
        for (name, w) in [
            ("w_plddt", self.w_plddt),
            ("w_ptm", self.w_ptm),
            ("w_pae", self.w_pae),
            ("epsilon", self.epsilon),
        ] {
            if !w.is_finite() {
                return Err(DomainError::NonFinite(name));
            }
            if w < 0.0 {
                return Err(DomainError::Argument(format!("{name} must be >= 0")));
            }
        }
        if self.w_plddt + self.w_ptm + self.w_pae <= 0.0 {
            return Err(DomainError::Argument(
                "score weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Collapses a metric triple into one scalar where higher is better.
///
/// Each metric is normalized onto [0, 1] before weighting, with the
/// interchain error inverted so that all three terms point the same way.
pub fn composite_score(
    m: &QualityMetrics,
    w: &ScoreWeights,
    pae_max: f64,
) -> Result<f64, DomainError> {
    if !(pae_max > 0.0 && pae_max.is_finite()) {
        return Err(DomainError::Argument("pae_max must be > 0".into()));
    }
    m.validate(pae_max)?;
    Ok(w.w_plddt * (m.plddt / 100.0) + w.w_ptm * m.ptm + w.w_pae * (1.0 - m.iface_pae / pae_max))
}

/// True iff `next` beats `prev` by more than the weights' epsilon. Ties are
/// declines.
pub fn improved(
    prev: &QualityMetrics,
    next: &QualityMetrics,
    w: &ScoreWeights,
    pae_max: f64,
) -> Result<bool, DomainError> {
    let before = composite_score(prev, w, pae_max)?;
    let after = composite_score(next, w, pae_max)?;
    Ok(after > before + w.epsilon)
}

/// A designed sequence with its generator log-likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSequence {
    pub id: SequenceId,
    pub residues: String,
    pub log_likelihood: f64,
    pub source_structure: StructureId,
    /// 1-based position after ranking; 0 until ranked.
    pub rank: u32,
    /// Ground-truth quality known only to synthetic generators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_quality: Option<f64>,
}

impl CandidateSequence {
    pub fn validate(&self) -> Result<(), DomainError> {
        validate_residues(&self.residues)?;
        if !self.log_likelihood.is_finite() {
            return Err(DomainError::NonFinite("log_likelihood"));
        }
        Ok(())
    }
}

pub fn validate_residues(residues: &str) -> Result<(), DomainError> {
    if residues.is_empty() {
        return Err(DomainError::Argument("empty residue string".into()));
    }
    match residues
        .char_indices()
        .find(|(_, c)| !c.is_ascii() || !AMINO_ACIDS.contains(&(*c as u8)))
    {
        Some((position, residue)) => Err(DomainError::InvalidResidue { residue, position }),
        None => Ok(()),
    }
}

/// Sorts a generation batch by descending log-likelihood and assigns ranks
/// 1..=K. Equal scores fall back to ascending sequence id.
pub fn rank_sequences(
    mut batch: Vec<CandidateSequence>,
) -> Result<Vec<CandidateSequence>, DomainError> {
    if batch.is_empty() {
        return Err(DomainError::Argument("cannot rank an empty batch".into()));
    }
    if batch.iter().any(|s| !s.log_likelihood.is_finite()) {
        return Err(DomainError::NonFinite("log_likelihood"));
    }
    batch.sort_by(|a, b| {
        b.log_likelihood
            .partial_cmp(&a.log_likelihood)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    for (i, s) in batch.iter_mut().enumerate() {
        s.rank = i as u32 + 1;
    }
    Ok(batch)
}

/// Opaque structure content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructurePayload {
    File(std::path::PathBuf),
    Inline(Vec<u8>),
    /// Stand-in used by synthetic executors: the latent design fitness.
    Synthetic { fitness: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureOrigin {
    Initial,
    Predicted { cycle: u32, sequence_id: SequenceId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProteinStructure {
    pub id: StructureId,
    pub payload: StructurePayload,
    pub origin: StructureOrigin,
    pub metrics: Option<QualityMetrics>,
}

impl ProteinStructure {
    pub fn initial(id: impl Into<String>, payload: StructurePayload) -> Self {
        Self {
            id: StructureId::new(id),
            payload,
            origin: StructureOrigin::Initial,
            metrics: None,
        }
    }

    pub fn predicted(
        id: impl Into<String>,
        payload: StructurePayload,
        cycle: u32,
        sequence_id: SequenceId,
        metrics: QualityMetrics,
    ) -> Self {
        Self {
            id: StructureId::new(id),
            payload,
            origin: StructureOrigin::Predicted { cycle, sequence_id },
            metrics: Some(metrics),
        }
    }

    /// Predicted structures carry metrics, initial ones never do.
    pub fn validate(&self, pae_max: f64) -> Result<(), DomainError> {
        match (&self.origin, &self.metrics) {
            (StructureOrigin::Initial, None) => Ok(()),
            (StructureOrigin::Predicted { .. }, Some(m)) => m.validate(pae_max),
            (StructureOrigin::Initial, Some(_)) => Err(DomainError::Argument(format!(
                "initial structure {} must not carry metrics",
                self.id
            ))),
            (StructureOrigin::Predicted { .. }, None) => Err(DomainError::Argument(format!(
                "predicted structure {} is missing metrics",
                self.id
            ))),
        }
    }

    pub fn latent_fitness(&self) -> Option<f64> {
        match self.payload {
            StructurePayload::Synthetic { fitness } => Some(fitness),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Accept,
    Retry,
    TerminateLane,
    CompleteLane,
}

impl DecisionKind {
    /// Whether the evaluated structure became the lane's current design.
    pub fn is_acceptance(self) -> bool {
        matches!(self, DecisionKind::Accept | DecisionKind::CompleteLane)
    }
}

/// One structure-prediction evaluation pass and the decision it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory_id: String,
    pub pipeline_id: PipelineId,
    pub lane: u32,
    /// Input structure the lane started from.
    pub structure_lineage: StructureId,
    pub cycle: u32,
    pub sequence: SequenceId,
    pub metrics: QualityMetrics,
    pub score: f64,
    pub decision: DecisionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub half_std: f64,
}

/// Median and half the population standard deviation.
pub fn summarize(values: &[f64]) -> Result<Summary, DomainError> {
    if values.is_empty() {
        return Err(DomainError::Argument("cannot summarize an empty list".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DomainError::NonFinite("values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(Summary {
        median,
        half_std: var.sqrt() / 2.0,
    })
}

/// Linear-interpolation quantile (the "type 7" estimator) of `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64, DomainError> {
    if values.is_empty() {
        return Err(DomainError::Argument("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(DomainError::Argument(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Derives a stable 64-bit seed from a root seed and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Independent random stream for `(root, label)`.
pub fn seed_stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> ScoreWeights {
        ScoreWeights::default()
    }

    fn seq(id: &str, ll: f64) -> CandidateSequence {
        CandidateSequence {
            id: SequenceId::new(id),
            residues: "MKV".into(),
            log_likelihood: ll,
            source_structure: "s".into(),
            rank: 0,
            latent_quality: None,
        }
    }

    #[test]
    fn composite_bounds() {
        let best = QualityMetrics::new(100.0, 1.0, 0.0);
        let worst = QualityMetrics::new(0.0, 0.0, DEFAULT_PAE_MAX);
        assert_eq!(composite_score(&best, &unit(), DEFAULT_PAE_MAX).unwrap(), 3.0);
        assert_eq!(composite_score(&worst, &unit(), DEFAULT_PAE_MAX).unwrap(), 0.0);
    }

    #[test]
    fn composite_mid_value() {
        // 0.75 + 0.8 + (1 - 10/31.75)
        let oracle = 75.0 / 100.0 + 0.8 + (31.75 - 10.0) / 31.75;
        let got = composite_score(&QualityMetrics::new(75.0, 0.8, 10.0), &unit(), 31.75).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 2.235_039_37).abs() < 1e-8);
    }

    #[test]
    fn composite_names_bad_field() {
        let err = composite_score(&QualityMetrics::new(50.0, 1.2, 3.0), &unit(), 31.75).unwrap_err();
        assert!(matches!(err, DomainError::OutOfRange { field: "ptm", .. }));
        let err = composite_score(&QualityMetrics::new(50.0, 0.2, 40.0), &unit(), 31.75).unwrap_err();
        assert!(matches!(err, DomainError::OutOfRange { field: "iface_pae", .. }));
        let err = composite_score(&QualityMetrics::new(-1.0, 0.2, 4.0), &unit(), 31.75).unwrap_err();
        assert!(matches!(err, DomainError::OutOfRange { field: "plddt", .. }));
    }

    #[test]
    fn improved_cases() {
        let prev = QualityMetrics::new(80.0, 0.70, 10.0);
        assert!(improved(&prev, &QualityMetrics::new(85.0, 0.75, 9.0), &unit(), 31.75).unwrap());
        assert!(!improved(&prev, &prev, &unit(), 31.75).unwrap());
        // +0.10 from plddt cancels -0.10 from ptm exactly.
        let next = QualityMetrics::new(90.0, 0.60, 10.0);
        let a = composite_score(&prev, &unit(), 31.75).unwrap();
        let b = composite_score(&next, &unit(), 31.75).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(!improved(&prev, &next, &unit(), 31.75).unwrap());
    }

    #[test]
    fn epsilon_margin_counts_as_decline() {
        let w = ScoreWeights {
            epsilon: 0.1,
            ..unit()
        };
        let prev = QualityMetrics::new(80.0, 0.70, 10.0);
        let next = QualityMetrics::new(85.0, 0.70, 10.0);
        assert!(!improved(&prev, &next, &w, 31.75).unwrap());
    }

    #[test]
    fn weights_validation() {
        assert!(unit().validate().is_ok());
        let zero = ScoreWeights {
            w_plddt: 0.0,
            w_ptm: 0.0,
            w_pae: 0.0,
            epsilon: 0.0,
        };
        assert!(zero.validate().is_err());
        let neg = ScoreWeights {
            w_ptm: -1.0,
            ..unit()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn ranking_descending() {
        let ranked =
            rank_sequences(vec![seq("a", -1.2), seq("b", -0.5), seq("c", -0.9)]).unwrap();
        let lls: Vec<f64> = ranked.iter().map(|s| s.log_likelihood).collect();
        assert_eq!(lls, vec![-0.5, -0.9, -1.2]);
        assert_eq!(ranked.iter().map(|s| s.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn ranking_ties_by_id() {
        let ranked = rank_sequences(vec![seq("z", -1.0), seq("a", -1.0)]).unwrap();
        assert_eq!(ranked[0].id.as_str(), "a");
        assert_eq!(ranked[1].id.as_str(), "z");
    }

    #[test]
    fn ranking_errors() {
        assert!(matches!(rank_sequences(vec![]), Err(DomainError::Argument(_))));
        assert!(matches!(
            rank_sequences(vec![seq("a", f64::NAN)]),
            Err(DomainError::NonFinite(_))
        ));
    }

    #[test]
    fn residue_alphabet() {
        assert!(validate_residues("ACDEFGHIKLMNPQRSTVWY").is_ok());
        assert!(matches!(
            validate_residues("MKXV"),
            Err(DomainError::InvalidResidue { residue: 'X', position: 2 })
        ));
        assert!(validate_residues("").is_err());
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(
            summarize(&[5.0]).unwrap(),
            Summary {
                median: 5.0,
                half_std: 0.0
            }
        );
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert!((s.half_std - 1.25f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((s.half_std - 0.559_016_994_4).abs() < 1e-10);
        let s = summarize(&[7.25; 3]).unwrap();
        assert_eq!((s.median, s.half_std), (7.25, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn structure_metrics_invariant() {
        let init = ProteinStructure::initial("s1", StructurePayload::Synthetic { fitness: 0.4 });
        assert!(init.validate(31.75).is_ok());
        let mut bad = init.clone();
        bad.metrics = Some(QualityMetrics::new(50.0, 0.5, 5.0));
        assert!(bad.validate(31.75).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 1.0).unwrap(), 3.0);
        assert_eq!(quantile(&[10.0], 0.3).unwrap(), 10.0);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
    }

    fn metrics() -> impl Strategy<Value = QualityMetrics> {
        (0.0..=100.0f64, 0.0..=1.0f64, 0.0..=DEFAULT_PAE_MAX)
            .prop_map(|(a, b, c)| QualityMetrics::new(a, b, c))
    }

    proptest! {
        #[test]
        fn composite_is_monotone(m in metrics(), d in 0.0..1.0f64) {
            let w = unit();
            let base = composite_score(&m, &w, DEFAULT_PAE_MAX).unwrap();
            let up_plddt = QualityMetrics { plddt: (m.plddt + d * 10.0).min(100.0), ..m };
            let up_ptm = QualityMetrics { ptm: (m.ptm + d * 0.1).min(1.0), ..m };
            let up_pae = QualityMetrics { iface_pae: (m.iface_pae + d).min(DEFAULT_PAE_MAX), ..m };
            prop_assert!(composite_score(&up_plddt, &w, DEFAULT_PAE_MAX).unwrap() >= base);
            prop_assert!(composite_score(&up_ptm, &w, DEFAULT_PAE_MAX).unwrap() >= base);
            prop_assert!(composite_score(&up_pae, &w, DEFAULT_PAE_MAX).unwrap() <= base);
        }

        #[test]
        fn improved_is_antisymmetric(a in metrics(), b in metrics(), eps in 0.0..0.5f64) {
            let w = ScoreWeights { epsilon: eps, ..unit() };
            let ab = improved(&a, &b, &w, DEFAULT_PAE_MAX).unwrap();
            let ba = improved(&b, &a, &w, DEFAULT_PAE_MAX).unwrap();
            prop_assert!(!(ab && ba));
        }

        #[test]
        fn ranking_is_a_permutation(lls in prop::collection::vec(-5.0..0.0f64, 1..30)) {
            let batch: Vec<_> = lls.iter().enumerate().map(|(i, ll)| seq(&format!("s{i:03}"), *ll)).collect();
            let ranked = rank_sequences(batch.clone()).unwrap();
            let mut ids: Vec<_> = ranked.iter().map(|s| s.id.clone()).collect();
            ids.sort();
            let mut orig: Vec<_> = batch.iter().map(|s| s.id.clone()).collect();
            orig.sort();
            prop_assert_eq!(ids, orig);
            prop_assert_eq!(ranked.iter().map(|s| s.rank).collect::<Vec<_>>(), (1..=lls.len() as u32).collect::<Vec<_>>());
            prop_assert!(ranked.windows(2).all(|w| w[0].log_likelihood >= w[1].log_likelihood));
            let again = rank_sequences(ranked.clone()).unwrap();
            prop_assert_eq!(again, ranked);
        }
    }
}
