//! The single JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::EvalConfig;
use crate::models::ModelConfig;
use crate::rl::RLConfig;
use crate::seed;
use crate::train::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_records: usize,
    pub images_per_prompt: usize,
    pub expert_fraction: f64,
    /// Minimum relevance for the decoder corpus.
    pub theta_rel: f64,
    /// Minimum quality for the decoder corpus.
    pub theta_q: f64,
    /// Keep at most this many preference pairs (in log order).
    pub max_preference_pairs: Option<usize>,
    /// Keep at most this many decoder examples (in log order).
    pub max_decoder_examples: Option<usize>,
    /// Records in the separate log used to score style recovery.
    pub heldout_records: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_records: 2100,
            images_per_prompt: 4,
            expert_fraction: 0.5,
            theta_rel: 0.5,
            theta_q: 0.6,
            max_preference_pairs: Some(2000),
            max_decoder_examples: Some(3000),
            heldout_records: 200,
        }
    }
}

/// Every section has defaults; unknown keys anywhere are rejected.
///
/// `seed` is the global seed. The `seed` fields of the train, rl and eval
/// sections are replaced by values derived from it in [`RunConfig::resolved`].
/// The world keeps its own seed because it names the world checkpoints belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RLConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out: PathBuf::from("out"),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rl: RLConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse strictly; a misspelled key is an error naming the key.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Copy with per-stage seeds derived from the global seed, validated.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.train.seed = seed::derive(self.seed, "train", 0);
        c.rl.seed = seed::derive(self.seed, "rl", 0);
        c.eval.seed = seed::derive(self.seed, "eval", 0);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.rl.validate()?;
        let d = &self.data;
        if d.n_records == 0 || d.images_per_prompt == 0 || d.heldout_records == 0 {
            return Err(invalid("data counts must be positive"));
        }
        if !(0.0..=1.0).contains(&d.expert_fraction) {
            return Err(invalid("expert_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&d.theta_rel) || !(0.0..=1.0).contains(&d.theta_q) {
            return Err(invalid("corpus thresholds must lie in [0, 1]"));
        }
        if self.eval.n_prompts == 0 || self.eval.n_images == 0 {
            return Err(invalid("eval counts must be positive"));
        }
        Ok(())
    }

    /// Seed of the training log.
    pub fn log_seed(&self) -> u64 {
        seed::derive(self.seed, "log", 0)
    }

    /// Seed of the held-out log and held-out prompts.
    pub fn heldout_seed(&self) -> u64 {
        seed::derive(self.seed, "heldout", 0)
    }

    /// Seed of the random-image encoder targets used by the ablation.
    pub fn random_target_seed(&self) -> u64 {
        seed::derive(self.seed, "random-target", 0)
    }
}
