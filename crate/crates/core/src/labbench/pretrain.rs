// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{PretrainConfig, RunConfig};
use crate::behaviors::{input_corpus, make_toy_vocab, meta_corpus, ToyVocab};
use crate::error::{Error, Result};
use crate::nanoformer::{lm_loss_batch, load_checkpoint, save_checkpoint, train_lm_step, Model, ModelConfig};
use crate::rng;
use crate::tensorkit::OptState;

const HELDOUT_CHUNK: usize = 32;

/// Which pretrained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Meta,
    InputB,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Input => "input",
            Role::Meta => "meta",
            Role::InputB => "input_b",
        }
    }

    pub fn model_config(self, cfg: &RunConfig) -> &ModelConfig {
        match self {
            Role::Input => &cfg.input,
            Role::Meta => &cfg.meta,
            Role::InputB => &cfg.input_b,
        }
    }

    pub fn checkpoint_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join("checkpoints").join(format!("{}.mmlb", self.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub role: Role,
    pub steps: usize,
    pub stopped_early: bool,
    /// `(step, held-out loss)` at every evaluation, starting before the first step.
    pub heldout: Vec<(usize, f32)>,
    pub final_train_loss: f32,
}

impl PretrainReport {
    pub fn final_heldout(&self) -> f32 {
        self.heldout.last().map_or(f32::NAN, |h| h.1)
    }
}

/// Token-weighted mean next-token loss.
pub fn heldout_loss(model: &Model, seqs: &[Vec<u32>]) -> Result<f32> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in seqs.chunks(HELDOUT_CHUNK) {
        let n: usize = chunk.iter().map(|s| s.len() - 1).sum();
        total += f64::from(lm_loss_batch(model, chunk)?) * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("empty held-out set".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Next-token training of a fresh model on `corpus` under the stopping rule of `pc`.
pub fn pretrain_lm(
    config: ModelConfig,
    corpus: &[Vec<u32>],
    heldout: &[Vec<u32>],
    pc: &PretrainConfig,
    role: Role,
) -> Result<(Model, OptState, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty pretraining corpus".into()));
    }
    let seed = config.seed;
    let mut model = Model::build(config)?;
    let mut opt = OptState::new(pc.optim, model.params());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch = 0u64;
    order.shuffle(&mut rng::derive(seed, "pretrain-order", epoch));
    let mut cursor = 0;

    let mut heldout_log = vec![(0, heldout_loss(&model, heldout)?)];
    let mut best = heldout_log[0].1;
    let mut stale = 0;
    let mut last_loss = f32::NAN;
    let mut steps = 0;
    let mut stopped_early = false;
    while steps < pc.max_steps {
        let mut batch = Vec::with_capacity(pc.batch_size);
        while batch.len() < pc.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order.shuffle(&mut rng::derive(seed, "pretrain-order", epoch));
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        last_loss = train_lm_step(&mut model, &batch, &mut opt)?;
        steps += 1;
        if steps % pc.eval_every == 0 || steps == pc.max_steps {
            let h = heldout_loss(&model, heldout)?;
            heldout_log.push((steps, h));
            if h < best * (1.0 - pc.min_improvement) {
                best = h;
                stale = 0;
            } else {
                stale += 1;
                if stale >= pc.patience && steps < pc.max_steps {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let report = PretrainReport {
        role,
        steps,
        stopped_early,
        heldout: heldout_log,
        final_train_loss: last_loss,
    };
    Ok((model, opt, report))
}

/// Pretraining and held-out corpora for `role`.
pub fn corpora(cfg: &RunConfig, vocab: &ToyVocab, role: Role) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let seed = role.model_config(cfg).seed;
    let pc = &cfg.pretrain;
    let build = |n: usize, label: &str| -> Result<Vec<Vec<u32>>> {
        let mut r = rng::derive(seed, label, 0);
        match role {
            Role::Meta => meta_corpus(
                vocab,
                &cfg.prompts,
                n,
                pc.meta_exchange_fraction,
                pc.meta_answer_rate,
                &mut r,
            ),
            Role::Input | Role::InputB => input_corpus(vocab, &cfg.prompts, n, &mut r),
        }
    };
    Ok((build(pc.corpus_size, "corpus")?, build(pc.heldout_size, "heldout")?))
}

/// Pretrains one model and writes its checkpoint (with optimizer state).
pub fn pretrain_role(cfg: &RunConfig, role: Role) -> Result<(Model, PretrainReport)> {
    let vocab = make_toy_vocab(&cfg.vocab)?;
    let (corpus, heldout) = corpora(cfg, &vocab, role)?;
    let (model, opt, report) = pretrain_lm(role.model_config(cfg).clone(), &corpus, &heldout, &cfg.pretrain, role)?;
    let path = role.checkpoint_path(cfg);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&model, Some(&opt), &path)?;
    // Cached bundles of the previous checkpoint are stale now.
    let stale = cfg.out_dir.join("data").join(role.name());
    if stale.exists() {
        std::fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let report_path = cfg.out_dir.join("checkpoints").join(format!("{}.json", role.name()));
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok((model, report))
}

/// Pretrains the listed models, writing checkpoints under `out_dir/checkpoints`.
pub fn pretrain_models(cfg: &RunConfig, roles: &[Role]) -> Result<Vec<(Model, PretrainReport)>> {
    cfg.validate()?;
    roles.iter().map(|&r| pretrain_role(cfg, r)).collect()
}

/// Loads a pretrained checkpoint and checks it matches the configured shape.
pub fn load_role(cfg: &RunConfig, role: Role) -> Result<Model> {
    let path = role.checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; run `pretrain` first",
            path.display()
        )));
    }
    let (model, _) = load_checkpoint(&path)?;
    if model.config() != role.model_config(cfg) {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different {} config",
            path.display(),
            role.name()
        )));
    }
    Ok(model)
}
