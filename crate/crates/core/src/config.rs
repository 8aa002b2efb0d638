//! The single JSON run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DamageSchedule;
use crate::episodes::{EpisodeSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_cache: PathBuf,
    pub test_cache: PathBuf,
    /// Train on only the first `n` classes of the training cache.
    #[serde(default)]
    pub train_classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Episode sampling and damage selection during training.
    pub data: u64,
    /// Weight initialization.
    pub model: u64,
    /// Evaluation episode sampling.
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_lr")]
    pub initial_lr: f64,
    #[serde(default = "TrainSection::default_halve")]
    pub halve_every: u64,
    #[serde(default)]
    pub spec: EpisodeSpec,
    pub max_episodes: u64,
    #[serde(default = "TrainSection::default_ckpt")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub save_optimizer: bool,
}

impl TrainSection {
    fn default_lr() -> f64 {
        2e-3
    }
    fn default_halve() -> u64 {
        2000
    }
    fn default_ckpt() -> u64 {
        200
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_way: usize,
    #[serde(default = "EvalSection::default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "EvalSection::default_episodes")]
    pub episodes_per_point: usize,
}

impl EvalSection {
    fn default_ks() -> Vec<usize> {
        (1..=19).collect()
    }
    fn default_episodes() -> usize {
        1000
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub damage: DamageSchedule,
    pub eval: EvalSection,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            initial_lr: t.initial_lr,
            halve_every: t.halve_every,
            spec: t.spec,
            max_episodes: t.max_episodes,
            checkpoint_every: t.checkpoint_every,
            seed: self.seeds.data,
            save_optimizer: t.save_optimizer,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.eval.n_way,
            ks: self.eval.ks.clone(),
            episodes_per_point: self.eval.episodes_per_point,
            seed: self.seeds.eval,
            threads: 1,
        }
    }

    /// Checks every section and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                });
            }
        };
        collect(self.model.validate());
        collect(self.train_config().validate());
        collect(self.damage.validate());
        if self.eval.n_way < 2 {
            collect(Err(Error::Config(format!("eval.n_way must be at least 2, got {}", self.eval.n_way))));
        }
        if self.eval.episodes_per_point == 0 {
            collect(Err(Error::Config("eval.episodes_per_point must be positive".into())));
        }
        if let Some(0) = self.data.train_classes {
            collect(Err(Error::Config("data.train_classes must be positive".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
