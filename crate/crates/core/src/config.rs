//! Experiment and matrix configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::StageSettings;

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSource {
    /// Generated in memory from a seeded spec.
    Generate(TaskSpec),
    /// JSON-lines indexes; relative paths resolve against the config file.
    Files { train: PathBuf, eval: PathBuf },
}

fn default_batch() -> usize {
    8
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    /// Train branch A's projector during stage 1 as well as branch B's.
    #[serde(default = "default_true")]
    pub stage1_trains_projector_a: bool,
}

fn default_max_new() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new_tokens: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub seed: u64,
    pub task: TaskSource,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses and validates; every problem is reported by key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving relative task paths against it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(p) => Error::Config(
                p.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })?;
        if let TaskSource::Files { train, eval } = &mut cfg.task {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, eval] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems("model");
        if self.id.is_empty() || self.id.contains(['/', '\\', ',']) {
            out.push(format!("id: {:?} must be non-empty without '/', '\\' or ','", self.id));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            out.push("training.batch_size: must be positive".into());
        }
        for (key, s) in [("training.stage1", &t.stage1), ("training.stage2", &t.stage2)] {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                out.push(format!("{key}.lr: {} must be finite and non-negative", s.lr));
            }
            if !(s.weight_decay.is_finite() && s.weight_decay >= 0.0) {
                out.push(format!("{key}.weight_decay: must be finite and non-negative"));
            }
            if s.warmup_steps.is_some_and(|w| w > s.steps) {
                out.push(format!("{key}.warmup_steps: exceeds steps {}", s.steps));
            }
        }
        if let TaskSource::Generate(spec) = &self.task {
            if spec.tile_size != self.model.tile_size() {
                out.push(format!(
                    "task.generate.tile_size: {} differs from the encoders' tile size {}",
                    spec.tile_size,
                    self.model.tile_size()
                ));
            }
            if spec.n_train == 0 {
                out.push("task.generate.n_train: must be positive".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Replaces the run seed and, for generated tasks, the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let TaskSource::Generate(spec) = &mut self.task {
            spec.seed = seed;
        }
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A list of experiment configs run with shared seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub id: String,
    /// Overrides each cell's seed when present.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Cell config paths, relative to the matrix file.
    pub cells: Vec<PathBuf>,
}

impl MatrixConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<ExperimentConfig>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if m.cells.is_empty() {
            return Err(Error::config(format!("{}: cells: empty matrix", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cells = Vec::with_capacity(m.cells.len());
        let mut problems = Vec::new();
        for c in &m.cells {
            match ExperimentConfig::load(base.join(c)) {
                Ok(cfg) => cells.push(match m.seed {
                    Some(s) => cfg.with_seed(s),
                    None => cfg,
                }),
                Err(Error::Config(p)) => problems.extend(p),
                Err(e) => return Err(e),
            }
        }
        let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            problems.push(format!("{}: duplicate cell id {}", path.display(), w[0]));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok((m, cells))
    }
}
