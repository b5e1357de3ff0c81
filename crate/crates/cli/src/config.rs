//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adaptflow_core::coordinator::{CoordinatorConfig, RunSetup, SubpipelinePolicy};
use adaptflow_core::domain::{ProteinStructure, ScoreWeights, StructurePayload, DEFAULT_PAE_MAX};
use adaptflow_core::executors::{SubprocessConfig, SyntheticConfig, TaskProfiles};
use adaptflow_core::protocol::{PipelineSpec, Policy};
use adaptflow_core::scheduler::ClockMode;
use adaptflow_core::time::Time;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override {0:?}: expected key=value")]
    OverrideSyntax(String),
    #[error("override {key}: {message}")]
    Override { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub cpu_cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockName {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    pub mode: ClockName,
    pub bootstrap_secs: f64,
    pub exec_setup_secs: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mode: ClockName::Simulated,
            bootstrap_secs: 60.0,
            exec_setup_secs: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub generation_secs: f64,
    pub prediction_secs: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            generation_secs: 180.0,
            prediction_secs: 1800.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Synthetic,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorConfig {
    pub kind: ExecutorKind,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    pub subprocess: Option<SubprocessConfig>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            subprocess: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub weights: ScoreWeights,
    pub pae_max: f64,
    pub final_cycle_adaptive: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            weights: ScoreWeights::default(),
            pae_max: DEFAULT_PAE_MAX,
            final_cycle_adaptive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    pub id: String,
    /// Latent fitness in [0, 1] for the synthetic executor.
    pub fitness: Option<f64>,
    /// Structure file for the subprocess executor.
    pub path: Option<PathBuf>,
}

fn default_cycles() -> u32 {
    4
}
fn default_k() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub id: String,
    pub policy: Policy,
    #[serde(default = "default_cycles")]
    pub cycles: u32,
    #[serde(default = "default_k")]
    pub sequences_per_structure: u32,
    #[serde(default = "default_k")]
    pub retry_limit: u32,
    #[serde(default)]
    pub sequential: bool,
    #[serde(default)]
    pub generation_params: BTreeMap<String, String>,
    pub structures: Vec<StructureConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub pool: PoolConfig,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default)]
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub executor: ExecutorConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub subpipelines: SubpipelinePolicy,
    pub pipelines: Vec<PipelineConfig>,
}

/// Parses a TOML-ish literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Sets `dotted.path = value` inside `root`. Numeric segments index arrays.
pub fn apply_override(root: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override {
        key: key.to_owned(),
        message,
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err("empty path segment".into()));
    }
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur: &mut Value = root
        .entry(parts[0].to_owned())
        .or_insert_with(|| Value::Table(Table::new()));
    if prefix.is_empty() {
        *cur = parse_value(raw);
        return Ok(());
    }
    for part in &prefix[1..] {
        cur = step(cur, part).map_err(err)?;
    }
    match cur {
        Value::Table(t) => {
            t.insert((*last).to_owned(), parse_value(raw));
        }
        Value::Array(a) => {
            let slot = index(a, last).map_err(err)?;
            *slot = parse_value(raw);
        }
        _ => return Err(err(format!("{} is not a table or array", prefix.join(".")))),
    }
    Ok(())
}

fn index<'a>(a: &'a mut [Value], part: &str) -> Result<&'a mut Value, String> {
    let i: usize = part.parse().map_err(|_| format!("{part:?} is not an array index"))?;
    let len = a.len();
    a.get_mut(i).ok_or_else(|| format!("index {i} out of bounds (length {len})"))
}

fn step<'a>(cur: &'a mut Value, part: &str) -> Result<&'a mut Value, String> {
    match cur {
        Value::Table(t) => Ok(t
            .entry(part.to_owned())
            .or_insert_with(|| Value::Table(Table::new()))),
        Value::Array(a) => index(a, part),
        _ => Err(format!("cannot descend into {part:?}")),
    }
}

impl RunConfig {
    pub fn from_str_with(text: &str, origin: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: origin.to_owned(),
            message,
        };
        // Parse once untouched so errors carry line and column.
        let mut config: RunConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if !overrides.is_empty() {
            let mut table: Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
            for o in overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| ConfigError::OverrideSyntax(o.clone()))?;
                apply_override(&mut table, k.trim(), v.trim())?;
            }
            config = Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| parse_err(format!("after overrides: {e}")))?;
        }
        config.resolve_paths(origin.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_str_with(&text, path, overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in &mut self.pipelines {
            for s in &mut p.structures {
                if let Some(path) = &mut s.path {
                    if path.is_relative() {
                        *path = base.join(&*path);
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.pool.cpu_cores == 0 {
            return bad("pool.cpu_cores must be >= 1".into());
        }
        if self.pipelines.is_empty() {
            return bad("at least one [[pipelines]] entry is required".into());
        }
        for (name, v) in [
            ("clock.bootstrap_secs", self.clock.bootstrap_secs),
            ("clock.exec_setup_secs", self.clock.exec_setup_secs),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        for (name, v) in [
            ("profiles.generation_secs", self.profiles.generation_secs),
            ("profiles.prediction_secs", self.profiles.prediction_secs),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive number"));
            }
        }
        match self.executor.kind {
            ExecutorKind::Synthetic => {
                if self.seed.is_none() {
                    return bad("seed is required with the synthetic executor".into());
                }
                self.executor
                    .synthetic
                    .validate()
                    .map_err(|e| ConfigError::Invalid(format!("executor.synthetic: {e}")))?;
            }
            ExecutorKind::Subprocess => {
                if self.executor.subprocess.is_none() {
                    return bad("executor.kind = \"subprocess\" needs an [executor.subprocess] table".into());
                }
            }
        }
        for (i, p) in self.pipelines.iter().enumerate() {
            for s in &p.structures {
                match (self.executor.kind, s.fitness, &s.path) {
                    (ExecutorKind::Synthetic, Some(_), None) => {}
                    (ExecutorKind::Subprocess, None, Some(path)) => {
                        if !path.exists() {
                            return bad(format!(
                                "pipelines[{i}] structure {}: file {} does not exist",
                                s.id,
                                path.display()
                            ));
                        }
                    }
                    (ExecutorKind::Synthetic, _, _) => {
                        return bad(format!("pipelines[{i}] structure {}: synthetic runs need `fitness` only", s.id))
                    }
                    (ExecutorKind::Subprocess, _, _) => {
                        return bad(format!("pipelines[{i}] structure {}: subprocess runs need `path` only", s.id))
                    }
                }
            }
        }
        let setup = self.setup(self.seed.unwrap_or(0));
        adaptflow_core::Coordinator::new(setup.coordinator.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for spec in &setup.pipelines {
            spec.validate(self.scoring.pae_max)
                .map_err(|e| ConfigError::Invalid(format!("pipeline {}: {e}", spec.id)))?;
        }
        let profiles = &setup.coordinator.profiles;
        for phase in profiles.generation.iter().chain(&profiles.prediction) {
            if phase.cpu_cores > self.pool.cpu_cores || phase.gpus > self.pool.gpus {
                return bad(format!(
                    "a task phase needs {} cores and {} GPUs but the pool has {} and {}",
                    phase.cpu_cores, phase.gpus, self.pool.cpu_cores, self.pool.gpus
                ));
            }
        }
        Ok(())
    }

    fn pipeline_specs(&self) -> Vec<PipelineSpec> {
        self.pipelines
            .iter()
            .map(|p| {
                let structures = p
                    .structures
                    .iter()
                    .map(|s| {
                        let payload = match (&s.path, s.fitness) {
                            (Some(path), _) => StructurePayload::File(path.clone()),
                            (None, f) => StructurePayload::Synthetic {
                                fitness: f.unwrap_or_default(),
                            },
                        };
                        ProteinStructure::initial(s.id.clone(), payload)
                    })
                    .collect();
                PipelineSpec {
                    cycles: p.cycles,
                    sequences_per_structure: p.sequences_per_structure,
                    retry_limit: p.retry_limit,
                    sequential: p.sequential,
                    generation_params: p.generation_params.clone(),
                    ..PipelineSpec::new(p.id.clone(), structures, p.policy)
                }
            })
            .collect()
    }

    /// The core run description for one seed.
    pub fn setup(&self, seed: u64) -> RunSetup {
        RunSetup {
            cpu_cores: self.pool.cpu_cores,
            gpus: self.pool.gpus,
            clock: match self.clock.mode {
                ClockName::Simulated => ClockMode::Simulated,
                ClockName::Wall => ClockMode::WallClock,
            },
            bootstrap: Time::from_secs_f64(self.clock.bootstrap_secs),
            exec_setup: Time::from_secs_f64(self.clock.exec_setup_secs),
            coordinator: CoordinatorConfig {
                weights: self.scoring.weights,
                pae_max: self.scoring.pae_max,
                subpipelines: self.subpipelines.clone(),
                final_cycle_adaptive: self.scoring.final_cycle_adaptive,
                seed,
                profiles: TaskProfiles::with_durations(
                    self.profiles.generation_secs,
                    self.profiles.prediction_secs,
                ),
            },
            pipelines: self.pipeline_specs(),
        }
    }
}
