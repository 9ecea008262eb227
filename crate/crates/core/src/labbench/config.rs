// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::behaviors::{PromptSpec, VocabSpec};
use crate::error::{Error, Result};
use crate::introspect::MetaTrainConfig;
use crate::nanoformer::{LayerTapSpec, ModelConfig};
use crate::tensorkit::AdamWConfig;

/// Language-model pretraining budget and stopping rule.
///
/// Training stops at `max_steps`, or earlier once `patience` consecutive
/// held-out evaluations (every `eval_every` steps) each fail to improve the
/// best held-out loss by at least `min_improvement` (relative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_improvement: f32,
    /// Share of meta-model corpus sequences that are question/answer exchanges.
    pub meta_exchange_fraction: f64,
    /// Share of those exchanges answered with a bare Yes or No.
    pub meta_answer_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1500,
            batch_size: 16,
            optim: AdamWConfig {
                lr: 2e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            corpus_size: 8000,
            heldout_size: 128,
            eval_every: 100,
            patience: 3,
            min_improvement: 0.01,
            meta_exchange_fraction: 0.3,
            meta_answer_rate: 0.2,
        }
    }
}

/// QA-set sizes generated for every run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSizes {
    /// Examples built per training dataset, before the split.
    pub per_dataset: usize,
    /// Held-out fraction of each training dataset.
    pub eval_fraction: f64,
    pub lie_eval: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self {
            per_dataset: 600,
            eval_fraction: 0.2,
            lie_eval: 400,
        }
    }
}

fn meta_default() -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        seed: 1,
        ..ModelConfig::default()
    }
}

fn input_b_default() -> ModelConfig {
    ModelConfig {
        n_layers: 10,
        d_model: 96,
        n_heads: 4,
        d_ff: 384,
        seed: 2,
        ..ModelConfig::default()
    }
}

/// Everything an experiment depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Stride between tapped input-model layers; taps read the final prompt token.
    pub tap_stride: usize,
    pub adapter_identity_when_square: bool,
    pub vocab: VocabSpec,
    pub prompts: PromptSpec,
    pub input: ModelConfig,
    pub meta: ModelConfig,
    pub input_b: ModelConfig,
    pub pretrain: PretrainConfig,
    pub datasets: DatasetSizes,
    pub meta_train: MetaTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1],
            workers: 1,
            tap_stride: 4,
            adapter_identity_when_square: true,
            vocab: VocabSpec::default(),
            prompts: PromptSpec::default(),
            input: ModelConfig::default(),
            meta: meta_default(),
            input_b: input_b_default(),
            pretrain: PretrainConfig::default(),
            datasets: DatasetSizes::default(),
            meta_train: MetaTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn taps_for(&self, input: &ModelConfig) -> LayerTapSpec {
        LayerTapSpec::strided(input.n_layers, self.tap_stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.tap_stride == 0 {
            return Err(Error::Config("tap stride must be positive".into()));
        }
        for (name, m) in [("input", &self.input), ("meta", &self.meta), ("input_b", &self.input_b)] {
            m.validate()
                .map_err(|e| Error::Config(format!("{name} model: {e}")))?;
            if m.vocab_size < self.vocab.total_size {
                return Err(Error::Config(format!(
                    "{name} model vocabulary {} is smaller than the toy vocabulary {}",
                    m.vocab_size, self.vocab.total_size
                )));
            }
        }
        if self.prompts.context_len > self.input.context_len || self.prompts.context_len > self.input_b.context_len {
            return Err(Error::Config("prompt context exceeds an input-model context".into()));
        }
        if self.prompts.context_len > self.meta.context_len {
            return Err(Error::Config("prompt context exceeds the meta-model context (pretraining corpus)".into()));
        }
        if self.datasets.per_dataset < 2 || self.datasets.lie_eval < 2 {
            return Err(Error::Config("dataset sizes must be at least 2".into()));
        }
        if !(self.datasets.eval_fraction > 0.0 && self.datasets.eval_fraction < 1.0) {
            return Err(Error::Config("eval fraction must lie in (0, 1)".into()));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.eval_every == 0 || self.pretrain.heldout_size == 0 {
            return Err(Error::Config("pretraining batch, eval interval and held-out size must be positive".into()));
        }
        if self.meta_train.batch_size == 0 {
            return Err(Error::Config("meta batch size must be positive".into()));
        }
        Ok(())
    }
}
