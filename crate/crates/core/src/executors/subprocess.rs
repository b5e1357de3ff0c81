//! Runs external tools in per-task sandbox directories.
//!
//! Sandbox layout, relative to `sandbox_root/<escaped task id>/`:
//!
//! * generation writes `input.pdb` (unless the structure is already a file)
//!   and expects a scores table: `id<TAB>log_likelihood[<TAB>residues]`,
//!   one sequence per line. Residues missing from the table are looked up
//!   in the optional sequences FASTA.
//! * prediction writes `input.fasta` and expects a metrics file of labeled
//!   lines (`plddt`, `ptm`, `iface_pae`) plus a structure file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{Executor, TaskOutputs, TaskPayload, TaskResult, TaskSpec};
use crate::domain::{
    CandidateSequence, ProteinStructure, QualityMetrics, SequenceId, StructurePayload,
    DEFAULT_PAE_MAX,
};
use crate::protocol::fasta::{compile_fasta, parse_fasta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParseRules {
    pub scores_file: String,
    pub sequences_file: Option<String>,
    pub metrics_file: String,
    pub structure_file: String,
}

impl Default for ParseRules {
    fn default() -> Self {
        Self {
            scores_file: "scores.tsv".into(),
            sequences_file: Some("sequences.fasta".into()),
            metrics_file: "metrics.txt".into(),
            structure_file: "model.pdb".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessConfig {
    /// Placeholders: `{task_id}`, `{sandbox}`, `{input}`, `{num_sequences}`,
    /// and `{param.<key>}` for generation parameters.
    pub generation_command: String,
    /// Placeholders: `{task_id}`, `{sandbox}`, `{fasta}`, `{sequence_id}`.
    pub prediction_command: String,
    pub sandbox_root: PathBuf,
    #[serde(default)]
    pub parse: ParseRules,
    #[serde(default = "default_pae_max")]
    pub pae_max: f64,
}

fn default_pae_max() -> f64 {
    DEFAULT_PAE_MAX
}

/// Directory name for a task's sandbox. Injective over task ids.
pub fn sandbox_dir_name(task_id: &str) -> String {
    let mut out = String::with_capacity(task_id.len() + 2);
    out.push_str("t-");
    for b in task_id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Substitutes `{name}` placeholders with shell-quoted values. `{{` and `}}`
/// produce literal braces.
pub fn render_template(template: &str, vars: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                out.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                out.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) => name.push(ch),
                        None => return Err(format!("unterminated placeholder {{{name}")),
                    }
                }
                let value = vars
                    .get(&name)
                    .ok_or_else(|| format!("unknown placeholder {{{name}}}"))?;
                out.push_str(&shell_quote(value));
            }
            '}' => return Err("unmatched '}' in template".into()),
            _ => out.push(c),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    config: SubprocessConfig,
}

impl SubprocessExecutor {
    pub fn new(config: SubprocessConfig) -> Self {
        Self { config }
    }

    pub fn sandbox_for(&self, task: &TaskSpec) -> PathBuf {
        self.config
            .sandbox_root
            .join(sandbox_dir_name(task.id.as_str()))
    }

    fn prepare_sandbox(&self, task: &TaskSpec) -> Result<PathBuf, String> {
        let dir = self.sandbox_for(task);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| format!("sandbox reset failed: {e}"))?;
        }
        fs::create_dir_all(&dir).map_err(|e| format!("sandbox creation failed: {e}"))?;
        dir.canonicalize()
            .map_err(|e| format!("sandbox path unresolvable: {e}"))
    }

    fn launch(&self, command: &str, sandbox: &Path) -> Result<(), String> {
        let stdout = fs::File::create(sandbox.join("stdout.log")).map_err(|e| e.to_string())?;
        let stderr = fs::File::create(sandbox.join("stderr.log")).map_err(|e| e.to_string())?;
        let status = Command::new("sh")
            .arg("-c")
            .arg(command)
            .current_dir(sandbox)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .status()
            .map_err(|e| format!("launch failed: {e}"))?;
        match status.code() {
            Some(0) => Ok(()),
            Some(code) => Err(format!("exit {code}")),
            None => Err("terminated by signal".into()),
        }
    }

    fn run(&self, task: &TaskSpec) -> Result<TaskOutputs, String> {
        let sandbox = self.prepare_sandbox(task)?;
        let mut vars = BTreeMap::new();
        vars.insert("task_id".to_owned(), task.id.to_string());
        vars.insert("sandbox".to_owned(), sandbox.display().to_string());
        match &task.payload {
            TaskPayload::Generation {
                structure,
                num_sequences,
                params,
            } => {
                let input = match &structure.payload {
                    StructurePayload::File(p) => p.clone(),
                    StructurePayload::Inline(bytes) => {
                        let p = sandbox.join("input.pdb");
                        fs::write(&p, bytes).map_err(|e| e.to_string())?;
                        p
                    }
                    StructurePayload::Synthetic { fitness } => {
                        let p = sandbox.join("input.pdb");
                        fs::write(&p, format!("REMARK synthetic fitness {fitness}\n"))
                            .map_err(|e| e.to_string())?;
                        p
                    }
                };
                vars.insert("input".to_owned(), input.display().to_string());
                vars.insert("num_sequences".to_owned(), num_sequences.to_string());
                for (k, v) in params {
                    vars.insert(format!("param.{k}"), v.clone());
                }
                let cmd = render_template(&self.config.generation_command, &vars)
                    .map_err(|e| format!("template: {e}"))?;
                self.launch(&cmd, &sandbox)?;
                let seqs = self.parse_generation(&sandbox, structure)?;
                Ok(TaskOutputs::Sequences(seqs))
            }
            TaskPayload::Prediction { sequence } => {
                let fasta = sandbox.join("input.fasta");
                let doc = compile_fasta(std::slice::from_ref(sequence)).map_err(|e| e.to_string())?;
                fs::write(&fasta, doc).map_err(|e| e.to_string())?;
                vars.insert("fasta".to_owned(), fasta.display().to_string());
                vars.insert("sequence_id".to_owned(), sequence.id.to_string());
                let cmd = render_template(&self.config.prediction_command, &vars)
                    .map_err(|e| format!("template: {e}"))?;
                self.launch(&cmd, &sandbox)?;
                let metrics = self.parse_metrics(&sandbox)?;
                let model = sandbox.join(&self.config.parse.structure_file);
                if !model.is_file() {
                    return Err("structure file absent".into());
                }
                let structure = ProteinStructure::predicted(
                    format!("{}.model", sequence.id),
                    StructurePayload::File(model),
                    task.provenance.cycle,
                    sequence.id.clone(),
                    metrics,
                );
                Ok(TaskOutputs::Prediction { structure, metrics })
            }
        }
    }

    fn parse_generation(
        &self,
        sandbox: &Path,
        structure: &ProteinStructure,
    ) -> Result<Vec<CandidateSequence>, String> {
        let rules = &self.config.parse;
        let text = fs::read_to_string(sandbox.join(&rules.scores_file))
            .map_err(|_| "scores file absent".to_string())?;
        let residues_by_id: BTreeMap<String, String> = match &rules.sequences_file {
            Some(name) if sandbox.join(name).is_file() => {
                let doc = fs::read_to_string(sandbox.join(name)).map_err(|e| e.to_string())?;
                parse_fasta(&doc)
                    .map_err(|e| format!("sequences file: {e}"))?
                    .into_iter()
                    .collect()
            }
            _ => BTreeMap::new(),
        };
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default().trim();
            let ll: f64 = cols
                .next()
                .and_then(|v| v.trim().parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| format!("scores file line {}: bad log-likelihood", lineno + 1))?;
            let residues = match cols.next() {
                Some(r) => r.trim().to_owned(),
                None => residues_by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| format!("no residues for sequence {id}"))?,
            };
            let seq = CandidateSequence {
                id: SequenceId::new(id),
                residues,
                log_likelihood: ll,
                source_structure: structure.id.clone(),
                rank: 0,
                latent_quality: None,
            };
            seq.validate()
                .map_err(|e| format!("scores file line {}: {e}", lineno + 1))?;
            out.push(seq);
        }
        if out.is_empty() {
            return Err("scores file empty".into());
        }
        Ok(out)
    }

    fn parse_metrics(&self, sandbox: &Path) -> Result<QualityMetrics, String> {
        let text = fs::read_to_string(sandbox.join(&self.config.parse.metrics_file))
            .map_err(|_| "metrics file absent".to_string())?;
        let mut found: BTreeMap<String, f64> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, value) = line
                .split_once(|c: char| c == '=' || c == ':' || c.is_whitespace())
                .ok_or_else(|| format!("metrics file: unlabeled line {line:?}"))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("metrics file: bad value for {label}"))?;
            found.insert(label.trim().to_ascii_lowercase(), value);
        }
        let get = |k: &str| {
            found
                .get(k)
                .copied()
                .ok_or_else(|| format!("metrics file missing {k}"))
        };
        let m = QualityMetrics::new(get("plddt")?, get("ptm")?, get("iface_pae")?);
        m.validate(self.config.pae_max)
            .map_err(|e| format!("metrics file: {e}"))?;
        Ok(m)
    }
}

impl Executor for SubprocessExecutor {
    fn execute(&self, task: &TaskSpec) -> TaskResult {
        match self.run(task) {
            Ok(outputs) => TaskResult::succeeded(task.id.clone(), outputs),
            Err(reason) => {
                log::warn!("task {} failed: {reason}", task.id);
                TaskResult::failed(task.id.clone(), reason)
            }
        }
    }
}
