// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adapter::Adapter;
use super::meta::{classify_batch, Classification, MetaSample};
use crate::behaviors::ToyVocab;
use crate::error::{Error, Result};
use crate::nanoformer::Model;

const EVAL_CHUNK: usize = 64;

/// Which accuracies to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// Full-vocabulary argmax must be the gold token.
    Strict,
    /// Larger of the Yes and No logits; ties answer No.
    Forced,
    #[default]
    Both,
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(ScoringMode::Strict),
            "forced" => Ok(ScoringMode::Forced),
            "both" => Ok(ScoringMode::Both),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Strict => "strict",
            ScoringMode::Forced => "forced",
            ScoringMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub strict: f64,
    pub forced: f64,
    pub n: usize,
    /// Fraction of samples whose full-vocabulary argmax is Yes or No.
    pub answer_rate: f64,
}

/// Scores predictions against gold answers.
pub fn score(vocab: &ToyVocab, predictions: &[Classification], samples: &[&MetaSample]) -> Result<Scores> {
    if predictions.is_empty() || predictions.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let (mut strict, mut forced, mut answered) = (0usize, 0usize, 0usize);
    for (c, s) in predictions.iter().zip(samples) {
        strict += usize::from(c.predicted == s.answer.token(vocab));
        forced += usize::from(c.forced_choice() == s.answer);
        answered += usize::from(c.predicted == vocab.yes() || c.predicted == vocab.no());
    }
    let n = samples.len() as f64;
    Ok(Scores {
        strict: strict as f64 / n,
        forced: forced as f64 / n,
        n: samples.len(),
        answer_rate: answered as f64 / n,
    })
}

/// Strict and forced-choice accuracy of the meta-model on `eval`.
pub fn evaluate(meta: &Model, adapter: &Adapter, vocab: &ToyVocab, eval: &[MetaSample]) -> Result<Scores> {
    if eval.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let refs: Vec<&MetaSample> = eval.iter().collect();
    let mut predictions = Vec::with_capacity(eval.len());
    for chunk in refs.chunks(EVAL_CHUNK) {
        predictions.extend(classify_batch(meta, adapter, vocab, chunk)?);
    }
    score(vocab, &predictions, &refs)
}
