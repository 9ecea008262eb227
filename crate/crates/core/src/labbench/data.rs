// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::behaviors::{build_balanced_qa_set, split, write_qa_set, ConditioningPrompt, DatasetTag, QAExample, ToyVocab};
use crate::error::{Error, Result};
use crate::introspect::{capture_batch, load_bundles, save_bundles, MetaSample};
use crate::nanoformer::{ActivationBundle, LayerTapSpec, Model};
use crate::rng;

const CAPTURE_CHUNK: usize = 64;

/// QA sets of one run seed: train/held-out splits of S, E, L, M and the LIE eval set.
#[derive(Debug, Clone, PartialEq)]
pub struct QaSets {
    pub seed: u64,
    pub train: BTreeMap<DatasetTag, Vec<QAExample>>,
    pub heldout: BTreeMap<DatasetTag, Vec<QAExample>>,
    pub lie: Vec<QAExample>,
}

impl QaSets {
    /// `(file stem, examples)` for every set, in a fixed order.
    pub fn named(&self) -> Vec<(String, &[QAExample])> {
        let mut out = Vec::new();
        for (tag, set) in &self.train {
            out.push((format!("{tag}_train"), set.as_slice()));
        }
        for (tag, set) in &self.heldout {
            out.push((format!("{tag}_eval"), set.as_slice()));
        }
        out.push(("LIE_eval".to_string(), self.lie.as_slice()));
        out
    }
}

pub fn build_qa_sets(cfg: &RunConfig, vocab: &ToyVocab, seed: u64) -> Result<QaSets> {
    let mut train = BTreeMap::new();
    let mut heldout = BTreeMap::new();
    for (i, tag) in DatasetTag::TRAINABLE.into_iter().enumerate() {
        let mut r = rng::derive(seed, "qa-set", i as u64);
        let set = build_balanced_qa_set(vocab, tag, cfg.datasets.per_dataset, &cfg.prompts, &mut r)?;
        let (tr, ev) = split(&set, cfg.datasets.eval_fraction, &mut r)?;
        train.insert(tag, tr);
        heldout.insert(tag, ev);
    }
    let mut r = rng::derive(seed, "qa-set", 99);
    let lie = build_balanced_qa_set(vocab, DatasetTag::Lie, cfg.datasets.lie_eval, &cfg.prompts, &mut r)?;
    Ok(QaSets {
        seed,
        train,
        heldout,
        lie,
    })
}

/// Meta-model samples of one seed, bundles captured from one input-model.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub seed: u64,
    pub d_in: usize,
    pub train: BTreeMap<DatasetTag, Vec<MetaSample>>,
    pub heldout: BTreeMap<DatasetTag, Vec<MetaSample>>,
    pub lie: Vec<MetaSample>,
}

pub fn capture_all(input: &Model, taps: &LayerTapSpec, set: &[QAExample]) -> Result<Vec<ActivationBundle>> {
    let prompts: Vec<&ConditioningPrompt> = set.iter().map(|e| &e.prompt).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in prompts.chunks(CAPTURE_CHUNK) {
        out.extend(capture_batch(input, chunk, taps)?);
    }
    Ok(out)
}

fn to_samples(vocab: &ToyVocab, set: &[QAExample], bundles: Vec<ActivationBundle>, context_len: usize) -> Result<Vec<MetaSample>> {
    set.iter()
        .zip(bundles)
        .map(|(ex, b)| MetaSample::new(vocab, &ex.question, b, ex.answer, context_len))
        .collect()
}

/// Directory for generated data of one input-model and seed.
pub fn data_dir(cfg: &RunConfig, model_name: &str, seed: u64) -> PathBuf {
    cfg.out_dir.join("data").join(model_name).join(format!("seed{seed}"))
}

fn cached_or_capture(input: &Model, taps: &LayerTapSpec, set: &[QAExample], cache: Option<&Path>) -> Result<Vec<ActivationBundle>> {
    if let Some(path) = cache {
        if path.exists() {
            let bundles = load_bundles(path)?;
            let fresh = bundles.len() == set.len()
                && bundles
                    .iter()
                    .all(|b| b.source_config_digest == input.config().digest() && &b.tap_spec == taps);
            if fresh {
                return Ok(bundles);
            }
        }
    }
    let bundles = capture_all(input, taps, set)?;
    if let Some(path) = cache {
        save_bundles(path, &bundles)?;
    }
    Ok(bundles)
}

/// Captures bundles for every set. With `cache_dir`, bundles are read from
/// and written to `<stem>.mmab` files there.
pub fn prepare_seed_data(
    cfg: &RunConfig,
    vocab: &ToyVocab,
    input: &Model,
    sets: &QaSets,
    cache_dir: Option<&Path>,
) -> Result<SeedData> {
    let taps = cfg.taps_for(input.config());
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ctx = cfg.meta.context_len;
    let cache = |stem: &str| cache_dir.map(|d| d.join(format!("{stem}.mmab")));
    let mut train = BTreeMap::new();
    let mut heldout = BTreeMap::new();
    for (tag, set) in &sets.train {
        let b = cached_or_capture(input, &taps, set, cache(&format!("{tag}_train")).as_deref())?;
        train.insert(*tag, to_samples(vocab, set, b, ctx)?);
    }
    for (tag, set) in &sets.heldout {
        let b = cached_or_capture(input, &taps, set, cache(&format!("{tag}_eval")).as_deref())?;
        heldout.insert(*tag, to_samples(vocab, set, b, ctx)?);
    }
    let b = cached_or_capture(input, &taps, &sets.lie, cache("LIE_eval").as_deref())?;
    Ok(SeedData {
        seed: sets.seed,
        d_in: input.config().d_model,
        train,
        heldout,
        lie: to_samples(vocab, &sets.lie, b, ctx)?,
    })
}

/// Writes every QA set of `sets` as JSON lines into `dir`.
pub fn write_qa_sets(dir: &Path, sets: &QaSets) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sets.named()
        .into_iter()
        .map(|(stem, set)| {
            let path = dir.join(format!("{stem}.jsonl"));
            write_qa_set(&path, set)?;
            Ok(path)
        })
        .collect()
}
