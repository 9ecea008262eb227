// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adapter::Adapter;
use super::eval::{evaluate, Scores};
use super::meta::{build_answer_logits, MetaSample};
use crate::behaviors::ToyVocab;
use crate::error::{Error, Result};
use crate::nanoformer::graph;
use crate::nanoformer::Model;
use crate::rng;
use crate::tensorkit::{adamw_step, clip_grad_norm, AdamWConfig, OptState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optim: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of every completed pass over the training mix, then of the partial last pass.
    pub epoch_losses: Vec<f32>,
    pub step_losses: Vec<f32>,
    pub steps: usize,
    pub seed: u64,
    /// In-distribution accuracy after training, when an eval set was given.
    pub eval: Option<Scores>,
}

/// Trains meta-model and adapter jointly on `train` (any mix of datasets,
/// visited in a fresh random order every pass). The loss is cross-entropy
/// over the full vocabulary at the answer slot.
pub fn train_meta(
    meta: &mut Model,
    adapter: &mut Adapter,
    vocab: &ToyVocab,
    train: &[MetaSample],
    eval: &[MetaSample],
    cfg: &MetaTrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Config("empty training mix".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut meta_opt = OptState::new(cfg.optim, meta.params());
    let mut adapter_opt = OptState::new(cfg.optim, adapter.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch = 0u64;
    order.shuffle(&mut rng::derive(cfg.seed, "meta-order", epoch));
    let mut cursor = 0;
    let mut epoch_sum = 0.0f64;
    let mut epoch_count = 0usize;
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        step_losses: Vec::with_capacity(cfg.steps),
        steps: 0,
        seed: cfg.seed,
        eval: None,
    };

    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                report.epoch_losses.push((epoch_sum / epoch_count as f64) as f32);
                (epoch_sum, epoch_count) = (0.0, 0);
                epoch += 1;
                order.shuffle(&mut rng::derive(cfg.seed, "meta-order", epoch));
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let loss = meta_step(meta, adapter, vocab, &batch, &mut meta_opt, &mut adapter_opt)?;
        report.step_losses.push(loss);
        report.steps += 1;
        epoch_sum += f64::from(loss) * batch.len() as f64;
        epoch_count += batch.len();
    }
    if epoch_count > 0 {
        report.epoch_losses.push((epoch_sum / epoch_count as f64) as f32);
    }
    if !eval.is_empty() {
        report.eval = Some(evaluate(meta, adapter, vocab, eval)?);
    }
    Ok(report)
}

/// One joint update; returns the pre-update loss.
pub fn meta_step(
    meta: &mut Model,
    adapter: &mut Adapter,
    vocab: &ToyVocab,
    batch: &[&MetaSample],
    meta_opt: &mut OptState,
    adapter_opt: &mut OptState,
) -> Result<f32> {
    let cfg = meta.config().clone();
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, meta.params(), true);
    let a = graph::load_params(&mut tape, adapter.params(), true);
    let logits = build_answer_logits(&cfg, &mut tape, &p, [a[0], a[1]], vocab, batch)?;
    let targets: Vec<usize> = batch.iter().map(|s| s.answer.token(vocab) as usize).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Training(format!("meta loss became {value}")));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = p
        .iter()
        .chain(&a)
        .map(|&v| tape.grad(v).expect("trainable").to_vec())
        .collect();
    if let Some(max) = meta_opt.config.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    let adapter_grads = grads.split_off(p.len());
    adamw_step(meta.params_mut(), &grads, meta_opt)?;
    adamw_step(adapter.params_mut(), &adapter_grads, adapter_opt)?;
    Ok(value)
}
