//! Deterministic stand-ins for the sequence generator and structure predictor.
//!
//! Every structure carries a latent fitness on [0, 1]. Generated sequences
//! scatter around it, their log-likelihoods track their latent quality, and a
//! predicted structure inherits the quality of the sequence it came from.
//! All randomness comes from streams keyed by `(root seed, task id)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Executor, TaskOutputs, TaskPayload, TaskResult, TaskSpec};
use crate::domain::{
    derive_seed, CandidateSequence, DomainError, ProteinStructure, QualityMetrics, SequenceId,
    StructureId, StructurePayload, AMINO_ACIDS, DEFAULT_PAE_MAX,
};
use rand::SeedableRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Spread of candidate quality around the parent structure's fitness.
    pub noise_sigma: f64,
    /// Pull of candidate quality toward `reversion_target`, in [0, 1].
    /// Zero makes candidates scatter around the parent's fitness exactly.
    pub reversion: f64,
    /// The generator's typical design quality.
    pub reversion_target: f64,
    /// Slope mapping latent quality to log-likelihood.
    pub ll_scale: f64,
    pub ll_jitter_sigma: f64,
    pub plddt_sigma: f64,
    pub ptm_sigma: f64,
    pub pae_sigma: f64,
    pub sequence_length: usize,
    pub pae_max: f64,
    /// Report metrics for `1 - q` instead of `q`.
    pub invert: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.07,
            reversion: 0.2,
            reversion_target: 0.6,
            ll_scale: 5.0,
            ll_jitter_sigma: 0.05,
            plddt_sigma: 2.0,
            ptm_sigma: 0.02,
            pae_sigma: 0.75,
            sequence_length: 96,
            pae_max: DEFAULT_PAE_MAX,
            invert: false,
        }
    }
}

impl SyntheticConfig {
    /// No noise anywhere.
    pub fn noiseless() -> Self {
        Self {
            noise_sigma: 0.0,
            reversion: 0.0,
            ll_jitter_sigma: 0.0,
            plddt_sigma: 0.0,
            ptm_sigma: 0.0,
            pae_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("ll_jitter_sigma", self.ll_jitter_sigma),
            ("plddt_sigma", self.plddt_sigma),
            ("ptm_sigma", self.ptm_sigma),
            ("pae_sigma", self.pae_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DomainError::Argument(format!("{name} must be >= 0")));
            }
        }
        for (name, v) in [("reversion", self.reversion), ("reversion_target", self.reversion_target)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DomainError::Argument(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.ll_scale.is_finite() && self.ll_scale > 0.0) {
            return Err(DomainError::Argument("ll_scale must be > 0".into()));
        }
        if self.sequence_length == 0 {
            return Err(DomainError::Argument("sequence_length must be >= 1".into()));
        }
        if !(self.pae_max.is_finite() && self.pae_max > 0.0) {
            return Err(DomainError::Argument("pae_max must be > 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma)
        .expect("sigma validated as finite and non-negative")
        .sample(rng)
}

#[derive(Debug, Clone)]
pub struct SyntheticExecutor {
    config: SyntheticConfig,
    root_seed: u64,
}

impl SyntheticExecutor {
    pub fn new(config: SyntheticConfig, root_seed: u64) -> Result<Self, DomainError> {
        config.validate()?;
        Ok(Self { config, root_seed })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Draws `k` candidates around `fitness`, ids `{prefix}.sNNN` in draw order.
    pub fn synth_generate(
        &self,
        fitness: f64,
        k: u32,
        seed: u64,
        source: &StructureId,
        prefix: &str,
    ) -> Result<Vec<CandidateSequence>, DomainError> {
        if k < 1 {
            return Err(DomainError::Argument("K must be >= 1".into()));
        }
        let fitness = fitness.clamp(0.0, 1.0);
        let center = fitness + self.config.reversion * (self.config.reversion_target - fitness);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = (k.to_string().len()).max(3);
        let mut out = Vec::with_capacity(k as usize);
        for i in 0..k {
            let q = (center + gaussian(&mut rng, self.config.noise_sigma)).clamp(0.0, 1.0);
            let jitter = gaussian(&mut rng, self.config.ll_jitter_sigma);
            let residues: String = (0..self.config.sequence_length)
                .map(|_| AMINO_ACIDS[rng.random_range(0..AMINO_ACIDS.len())] as char)
                .collect();
            out.push(CandidateSequence {
                id: SequenceId::new(format!("{prefix}.s{:0width$}", i + 1)),
                residues,
                log_likelihood: self.config.ll_scale * (q - 1.0) + jitter,
                source_structure: source.clone(),
                rank: 0,
                latent_quality: Some(q),
            });
        }
        Ok(out)
    }

    /// Maps latent quality `q` to an observed metric triple plus a predicted
    /// structure whose fitness is `q`.
    pub fn synth_predict(
        &self,
        sequence: &CandidateSequence,
        q: f64,
        cycle: u32,
        seed: u64,
    ) -> Result<(ProteinStructure, QualityMetrics), DomainError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(DomainError::OutOfRange {
                field: "latent_quality",
                value: q,
                min: 0.0,
                max: 1.0,
            });
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seen = if c.invert { 1.0 - q } else { q };
        let plddt = (100.0 * (0.4 + 0.55 * seen) + gaussian(&mut rng, c.plddt_sigma)).clamp(0.0, 100.0);
        let ptm = (0.3 + 0.65 * seen + gaussian(&mut rng, c.ptm_sigma)).clamp(0.0, 1.0);
        let iface_pae =
            (c.pae_max * (0.8 - 0.7 * seen) + gaussian(&mut rng, c.pae_sigma)).clamp(0.0, c.pae_max);
        let metrics = QualityMetrics::new(plddt, ptm, iface_pae);
        let structure = ProteinStructure::predicted(
            format!("{}.model", sequence.id),
            StructurePayload::Synthetic { fitness: q },
            cycle,
            sequence.id.clone(),
            metrics,
        );
        Ok((structure, metrics))
    }

    fn run(&self, task: &TaskSpec) -> Result<TaskOutputs, String> {
        let seed = derive_seed(self.root_seed, task.id.as_str());
        let prov = &task.provenance;
        match &task.payload {
            TaskPayload::Generation {
                structure,
                num_sequences,
                ..
            } => {
                let fitness = structure
                    .latent_fitness()
                    .ok_or_else(|| format!("structure {} has no synthetic fitness", structure.id))?;
                let prefix = format!("{}.L{}.c{}", prov.pipeline, prov.lane, prov.cycle);
                self.synth_generate(fitness, *num_sequences, seed, &structure.id, &prefix)
                    .map(TaskOutputs::Sequences)
                    .map_err(|e| e.to_string())
            }
            TaskPayload::Prediction { sequence } => {
                let q = sequence
                    .latent_quality
                    .ok_or_else(|| format!("sequence {} has no latent quality", sequence.id))?;
                self.synth_predict(sequence, q, prov.cycle, seed)
                    .map(|(structure, metrics)| TaskOutputs::Prediction { structure, metrics })
                    .map_err(|e| e.to_string())
            }
        }
    }
}

impl Executor for SyntheticExecutor {
    fn execute(&self, task: &TaskSpec) -> TaskResult {
        match self.run(task) {
            Ok(outputs) => TaskResult::succeeded(task.id.clone(), outputs),
            Err(reason) => TaskResult::failed(task.id.clone(), reason),
        }
    }
}
