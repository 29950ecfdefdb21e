//! Training configuration: one JSON document drives both stages.
//! Unknown keys are rejected so typos fail loudly instead of training with
//! silently dropped settings.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::loss::{CostWeights, FocalParams};
use crate::model::{ModelDims, MoleSettings};
use crate::scene::SceneParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Pretrain => write!(f, "pretrain"),
            Stage::Finetune => write!(f, "finetune"),
        }
    }
}

/// Scene knobs that are independent of the model; grid size and token count
/// are always taken from the model dimensions so the two cannot drift apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSettings {
    pub count_range: (usize, usize),
    pub noise: f64,
    pub frames_per_concept: usize,
    pub box_size_range: (f64, f64),
}

impl Default for SceneSettings {
    fn default() -> SceneSettings {
        SceneSettings {
            count_range: (1, 2),
            noise: 0.05,
            frames_per_concept: 6,
            box_size_range: (0.18, 0.32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub lb_weight: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub mole: MoleSettings,
    pub model: ModelDims,
    pub concepts: usize,
    pub concept_dim: usize,
    pub scene: SceneSettings,
    pub train_scenes: usize,
    pub corpus_seed: u64,
    pub model_seed: u64,
    pub data_seed: u64,
    pub matching: CostWeights,
    pub loss_weights: CostWeights,
    #[serde(default)]
    pub focal: FocalParams,
    /// Extra name prefixes held frozen during pretraining, for setups where
    /// part of the network arrives pretrained. Empty by default.
    #[serde(default)]
    pub freeze: Vec<String>,
}

#[derive(Debug)]
pub enum ConfigError {
    Invalid { field: &'static str, reason: &'static str },
    Io(std::io::Error),
    Parse(serde_json::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Invalid { field, reason } => write!(f, "bad config: {field} {reason}"),
            ConfigError::Io(e) => write!(f, "config io: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> ConfigError {
        ConfigError::Io(e)
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> ConfigError {
        ConfigError::Parse(e)
    }
}

impl TrainConfig {
    /// Stage-1 reference configuration: trains the whole base model on
    /// streamed scenes in a few minutes of CPU time.
    pub fn pretrain_desk() -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 2,
            warmup_steps: 100,
            lb_weight: 1e-2,
            weight_decay: 0.0,
            mole: MoleSettings::desk(),
            model: ModelDims::desk(),
            concepts: 10,
            concept_dim: 16,
            scene: SceneSettings::default(),
            train_scenes: 2000,
            corpus_seed: 7,
            model_seed: 11,
            data_seed: 13,
            matching: CostWeights::matching(),
            loss_weights: CostWeights::training(),
            focal: FocalParams::default(),
            freeze: Vec::new(),
        }
    }

    /// Stage-2 reference configuration: expert adapters only, shorter run.
    pub fn finetune_desk() -> TrainConfig {
        TrainConfig {
            stage: Stage::Finetune,
            learning_rate: 1e-3,
            epochs: 1,
            data_seed: 29,
            ..TrainConfig::pretrain_desk()
        }
    }

    /// The published operating point, kept as plain configuration: 900
    /// queries, 256 speech tokens, rank-64 adapters, frozen decoder in
    /// stage 1. Hours of compute; never exercised by the test suite.
    pub fn full_scale() -> TrainConfig {
        TrainConfig {
            stage: Stage::Pretrain,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 10,
            warmup_steps: 1000,
            lb_weight: 1e-2,
            weight_decay: 1e-4,
            mole: MoleSettings {
                rank: 64,
                experts: 2,
                lora_alpha: 64.0,
            },
            model: ModelDims {
                d: 256,
                d_ffn: 2048,
                k_tokens: 256,
                n_queries: 900,
                grid: (32, 32),
                enhancer_blocks: 6,
                decoder_layers: 6,
            },
            concepts: 80,
            concept_dim: 64,
            scene: SceneSettings {
                count_range: (1, 4),
                noise: 0.05,
                frames_per_concept: 24,
                box_size_range: (0.1, 0.4),
            },
            train_scenes: 100_000,
            corpus_seed: 7,
            model_seed: 11,
            data_seed: 13,
            matching: CostWeights::matching(),
            loss_weights: CostWeights::training(),
            focal: FocalParams::default(),
            freeze: vec!["dec.".to_string()],
        }
    }

    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            count_range: self.scene.count_range,
            noise: self.scene.noise,
            grid: self.model.grid,
            frames_per_concept: self.scene.frames_per_concept,
            k_tokens: self.model.k_tokens,
            box_size_range: self.scene.box_size_range,
        }
    }

    /// Optimizer steps one full run performs.
    pub fn total_steps(&self) -> u64 {
        let per_epoch = self.train_scenes / self.batch_size;
        (self.epochs * per_epoch) as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, reason: &'static str) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid { field, reason })
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be nonnegative and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lb_weight >= 0.0 && self.lb_weight.is_finite()) {
            return bad("lb_weight", "must be nonnegative and finite");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be nonnegative and finite");
        }
        if self.mole.rank == 0 || self.mole.experts == 0 {
            return bad("mole", "rank and expert count must be at least 1");
        }
        if !(self.mole.lora_alpha > 0.0 && self.mole.lora_alpha.is_finite()) {
            return bad("mole", "lora_alpha must be positive and finite");
        }
        let m = &self.model;
        if m.d == 0 || m.d % 4 != 0 {
            return bad("model", "d must be a positive multiple of 4");
        }
        if m.d_ffn == 0 || m.k_tokens == 0 || m.decoder_layers == 0 {
            return bad("model", "d_ffn, k_tokens, decoder_layers must be at least 1");
        }
        if m.n_queries == 0 || m.n_queries > m.grid.0 * m.grid.1 {
            return bad("model", "n_queries must be in 1..=grid positions");
        }
        if self.concepts == 0 || self.concept_dim == 0 {
            return bad("concepts", "vocabulary must be nonempty");
        }
        let s = &self.scene;
        if s.count_range.0 > s.count_range.1 || s.count_range.1 > self.concepts {
            return bad("scene", "count_range must be ordered and within the vocabulary");
        }
        if !(s.noise >= 0.0 && s.noise.is_finite()) {
            return bad("scene", "noise must be nonnegative and finite");
        }
        if s.frames_per_concept == 0 {
            return bad("scene", "frames_per_concept must be at least 1");
        }
        if !(s.box_size_range.0 > 0.0 && s.box_size_range.0 <= s.box_size_range.1
            && s.box_size_range.1 < 1.0)
        {
            return bad("scene", "box sizes must satisfy 0 < lo <= hi < 1");
        }
        if self.train_scenes == 0 {
            return bad("train_scenes", "must be at least 1");
        }
        for w in [&self.matching, &self.loss_weights] {
            if !(w.w_cls >= 0.0 && w.w_l1 >= 0.0 && w.w_giou >= 0.0) {
                return bad("weights", "cost weights must be nonnegative");
            }
        }
        if !(self.focal.gamma >= 0.0 && self.focal.gamma.is_finite()) {
            return bad("focal", "gamma must be nonnegative and finite");
        }
        if let Some(a) = self.focal.alpha {
            if !(a > 0.0 && a < 1.0) {
                return bad("focal", "alpha must lie strictly between 0 and 1");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}
