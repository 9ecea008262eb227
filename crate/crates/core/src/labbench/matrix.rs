// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::config::RunConfig;
use super::data::SeedData;
use super::report::{CellRecord, CellStatus, EvalReport};
use crate::behaviors::{DatasetTag, ToyVocab};
use crate::error::{Error, Result};
use crate::introspect::{evaluate, train_meta, Adapter, MetaSample, MetaTrainConfig};
use crate::nanoformer::Model;
use crate::rng;

/// A set of training datasets; empty means no meta-training.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Combo(Vec<DatasetTag>);

impl Combo {
    pub fn new(mut tags: Vec<DatasetTag>) -> Result<Self> {
        tags.sort();
        tags.dedup();
        if tags.contains(&DatasetTag::Lie) {
            return Err(Error::Config("LIE is evaluation-only".into()));
        }
        Ok(Self(tags))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tags(&self) -> &[DatasetTag] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `none`, or the tags joined by `+` (e.g. `S+L`).
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            "none".to_string()
        } else {
            self.0.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
        }
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::empty());
        }
        Self::new(s.split(['+', ',']).map(str::parse).collect::<Result<_>>()?)
    }
}

/// The training combinations evaluated on LIE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixSpec {
    pub combos: Vec<Combo>,
}

impl MatrixSpec {
    /// Every subset of `datasets`, smallest first.
    pub fn subsets_of(datasets: &[DatasetTag]) -> Result<Self> {
        let base = Combo::new(datasets.to_vec())?;
        let n = base.0.len();
        let mut combos: Vec<Combo> = (0u32..1 << n)
            .map(|mask| Combo((0..n).filter(|i| mask & (1 << i) != 0).map(|i| base.0[i]).collect()))
            .collect();
        combos.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { combos })
    }

    /// All 16 subsets of {S, E, L, M}.
    pub fn full() -> Self {
        Self::subsets_of(&DatasetTag::TRAINABLE).expect("trainable tags")
    }
}

/// Shared, read-only inputs of every cell of one seed.
pub struct CellContext<'a> {
    pub cfg: &'a RunConfig,
    pub vocab: &'a ToyVocab,
    pub meta: &'a Model,
    pub data: &'a SeedData,
}

/// Trains a fresh copy of the meta-model on `combo` (unless empty) and scores it on LIE.
pub fn run_cell(combo: &Combo, ctx: &CellContext<'_>) -> Result<CellRecord> {
    let start = Instant::now();
    let seed = ctx.data.seed;
    let mut meta = ctx.meta.clone();
    let mut adapter = Adapter::new(
        ctx.data.d_in,
        meta.config().d_model,
        ctx.cfg.adapter_identity_when_square,
        rng::sub_seed(seed, "adapter", 0),
    )?;
    let mut steps = 0;
    let mut final_loss = None;
    let mut heldout_forced = None;
    if !combo.is_empty() {
        let mut train: Vec<MetaSample> = Vec::new();
        let mut heldout: Vec<MetaSample> = Vec::new();
        for tag in combo.tags() {
            let missing = || Error::Config(format!("no {tag} data for seed {seed}"));
            train.extend(ctx.data.train.get(tag).ok_or_else(missing)?.iter().cloned());
            heldout.extend(ctx.data.heldout.get(tag).ok_or_else(missing)?.iter().cloned());
        }
        let tc = MetaTrainConfig {
            seed: rng::sub_seed(seed, &format!("cell-{}", combo.label()), 0),
            ..ctx.cfg.meta_train.clone()
        };
        let report = train_meta(&mut meta, &mut adapter, ctx.vocab, &train, &heldout, &tc)?;
        steps = report.steps;
        final_loss = report.step_losses.last().copied();
        heldout_forced = report.eval.map(|s| s.forced);
    }
    let scores = evaluate(&meta, &adapter, ctx.vocab, &ctx.data.lie)?;
    Ok(CellRecord {
        combo: combo.label(),
        seed,
        status: CellStatus::Ok,
        strict: Some(scores.strict),
        forced: Some(scores.forced),
        answer_rate: Some(scores.answer_rate),
        heldout_forced,
        steps,
        final_loss,
        wall_clock_s: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Runs every (combination, seed) cell on a pool of `cfg.workers` threads.
/// A failing cell becomes a failed record; the rest still run.
pub fn run_matrix(
    spec: &MatrixSpec,
    cfg: &RunConfig,
    vocab: &ToyVocab,
    meta: &Model,
    seeds: &[SeedData],
    label: &str,
) -> Result<EvalReport> {
    let jobs: Vec<(&Combo, &SeedData)> = seeds
        .iter()
        .flat_map(|d| spec.combos.iter().map(move |c| (c, d)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let records: Vec<CellRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|(combo, data)| {
                let start = Instant::now();
                let ctx = CellContext { cfg, vocab, meta, data };
                run_cell(combo, &ctx).unwrap_or_else(|e| {
                    CellRecord::failed(combo.label(), data.seed, e.to_string(), start.elapsed().as_secs_f64())
                })
            })
            .collect()
    });
    Ok(EvalReport::new(label, records))
}
