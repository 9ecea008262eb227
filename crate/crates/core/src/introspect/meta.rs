// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::behaviors::{Answer, ConditioningPrompt, Control, ToyVocab};
use crate::error::{Error, Result};
use crate::nanoformer::graph::{self, Overrides, PackedBatch};
use crate::nanoformer::{ActivationBundle, LayerTapSpec, Model, ModelConfig};
use crate::tensorkit::{Element, Tape, Tensor, Var};

use super::adapter::Adapter;

/// `BOS USER question… PLACEHOLDER×n META`; the answer is the token after `META`.
pub fn assemble_meta_prompt(vocab: &ToyVocab, question: &[u32], n_placeholders: usize, context_len: usize) -> Result<Vec<u32>> {
    if n_placeholders == 0 {
        return Err(Error::Input("meta prompt needs at least one placeholder".into()));
    }
    let mut tokens = vec![vocab.control(Control::Bos), vocab.control(Control::User)];
    tokens.extend_from_slice(question);
    tokens.extend(std::iter::repeat_n(vocab.placeholder(), n_placeholders));
    tokens.push(vocab.control(Control::Meta));
    if tokens.len() > context_len {
        return Err(Error::Input(format!(
            "meta prompt of {} tokens exceeds context {context_len}",
            tokens.len()
        )));
    }
    Ok(tokens)
}

/// A meta prompt with the bundle that fills its placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    pub tokens: Vec<u32>,
    pub bundle: ActivationBundle,
    pub answer: Answer,
}

impl MetaSample {
    pub fn new(vocab: &ToyVocab, question: &[u32], bundle: ActivationBundle, answer: Answer, context_len: usize) -> Result<Self> {
        let tokens = assemble_meta_prompt(vocab, question, bundle.len(), context_len)?;
        Ok(Self { tokens, bundle, answer })
    }

    /// Positions of the placeholder tokens; checks they match the bundle length.
    pub fn placeholder_rows(&self, vocab: &ToyVocab) -> Result<Vec<usize>> {
        let ph = vocab.placeholder();
        let rows: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == ph)
            .map(|(i, _)| i)
            .collect();
        if rows.len() != self.bundle.len() {
            return Err(Error::Contract(format!(
                "{} placeholders for a bundle of {} vectors",
                rows.len(),
                self.bundle.len()
            )));
        }
        Ok(rows)
    }
}

/// Activations of the frozen input-model at the tap points, for one prompt.
pub fn capture(input: &Model, prompt: &ConditioningPrompt, taps: &LayerTapSpec) -> Result<ActivationBundle> {
    Ok(input.forward_with_taps(&prompt.tokens, taps)?.1)
}

/// [`capture`] for many prompts in one packed pass. Rows never interact
/// across prompts, so the result equals capturing each prompt alone.
pub fn capture_batch(input: &Model, prompts: &[&ConditioningPrompt], taps: &LayerTapSpec) -> Result<Vec<ActivationBundle>> {
    let cfg = input.config();
    taps.validate(cfg.n_layers)?;
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    let seqs: Vec<&[u32]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    let batch = PackedBatch::new(&seqs, cfg)?;
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, input.params(), false);
    let trunk = graph::build_trunk(cfg, &mut tape, &p, &batch, None)?;
    seqs.iter()
        .enumerate()
        .map(|(s, tokens)| {
            let pos = taps.position.resolve(tokens.len())?;
            let row = batch.row(s, pos);
            Ok(ActivationBundle {
                vectors: taps
                    .layers
                    .iter()
                    .map(|&l| tape.value(trunk.residuals[l]).row(row).to_vec())
                    .collect(),
                source_config_digest: cfg.digest(),
                tap_spec: taps.clone(),
            })
        })
        .collect()
}

/// Answer-slot logits and the resulting prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub logit_yes: f32,
    pub logit_no: f32,
    /// Argmax over the full vocabulary (lowest id wins ties).
    pub predicted: u32,
}

impl Classification {
    fn from_row(vocab: &ToyVocab, row: &[f32]) -> Self {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Self {
            logit_yes: row[vocab.yes() as usize],
            logit_no: row[vocab.no() as usize],
            predicted: best as u32,
        }
    }

    /// Yes only if its logit is strictly larger.
    pub fn forced_choice(&self) -> Answer {
        if self.logit_yes > self.logit_no {
            Answer::Yes
        } else {
            Answer::No
        }
    }
}

/// Projects the bundle, substitutes it for the placeholder embeddings and
/// reads the logits at the final prompt position.
pub fn inject_and_classify(meta: &Model, adapter: &Adapter, vocab: &ToyVocab, sample: &MetaSample) -> Result<Classification> {
    let rows = sample.placeholder_rows(vocab)?;
    check_widths(meta.config(), adapter, &sample.bundle)?;
    let projected = adapter.project(&sample.bundle)?;
    let overrides: BTreeMap<usize, Vec<f32>> = rows.into_iter().zip(projected).collect();
    let logits = meta.forward_with_overrides(&sample.tokens, &overrides)?;
    let last = logits.shape()[0] - 1;
    Ok(Classification::from_row(vocab, logits.row(last)))
}

fn check_widths(cfg: &ModelConfig, adapter: &Adapter, bundle: &ActivationBundle) -> Result<()> {
    if adapter.d_meta() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "adapter output {} for meta d_model {}",
            adapter.d_meta(),
            cfg.d_model
        )));
    }
    bundle.validate(adapter.d_in())
}

/// Builds `[samples × vocab]` answer-slot logits on `tape`.
/// `meta_p` holds the meta-model parameters, `adapter_p` the adapter weight and bias.
pub fn build_answer_logits<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    meta_p: &[Var],
    adapter_p: [Var; 2],
    vocab: &ToyVocab,
    samples: &[&MetaSample],
) -> Result<Var> {
    let seqs: Vec<&[u32]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let batch = PackedBatch::new(&seqs, cfg)?;
    let d_in = tape.value(adapter_p[0]).shape()[0];
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        s.bundle.validate(d_in)?;
        for (r, v) in s.placeholder_rows(vocab)?.into_iter().zip(&s.bundle.vectors) {
            rows.push(batch.row(i, r));
            data.extend(v.iter().map(|&x| T::of(f64::from(x))));
        }
    }
    let bundles = tape.leaf(Tensor::new(vec![rows.len(), d_in], data)?);
    let projected = tape.matmul(bundles, adapter_p[0])?;
    let projected = tape.add_bias(projected, adapter_p[1])?;
    let trunk = graph::build_trunk(
        cfg,
        tape,
        meta_p,
        &batch,
        Some(Overrides {
            vectors: projected,
            rows: &rows,
        }),
    )?;
    let answer_rows = tape.gather_rows(trunk.last(), &batch.last_rows())?;
    graph::build_head(cfg, tape, meta_p, answer_rows)
}

/// Batched, gradient-free [`inject_and_classify`].
pub fn classify_batch(meta: &Model, adapter: &Adapter, vocab: &ToyVocab, samples: &[&MetaSample]) -> Result<Vec<Classification>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    if adapter.d_meta() != meta.config().d_model {
        return Err(Error::Dimension(format!(
            "adapter output {} for meta d_model {}",
            adapter.d_meta(),
            meta.config().d_model
        )));
    }
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, meta.params(), false);
    let a = graph::load_params(&mut tape, adapter.params(), false);
    let logits = build_answer_logits(meta.config(), &mut tape, &p, [a[0], a[1]], vocab, samples)?;
    let t = tape.value(logits);
    Ok((0..samples.len())
        .map(|i| Classification::from_row(vocab, t.row(i)))
        .collect())
}
