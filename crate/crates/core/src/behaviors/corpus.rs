// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-modelling corpora for pretraining the toy models.

use rand::Rng;

use super::labels::{BehaviorLabel, DatasetTag, Polarity};
use super::prompts::{build_question, PromptSpec};
use super::qa::prompt_for;
use super::text::alphabet_token;
use super::vocab::{Control, ToyVocab, VocabGroup};
use crate::error::Result;

const ALL_TAGS: [DatasetTag; 5] = [
    DatasetTag::S,
    DatasetTag::E,
    DatasetTag::L,
    DatasetTag::M,
    DatasetTag::Lie,
];

fn polarity(rng: &mut impl Rng) -> Polarity {
    if rng.random_bool(0.5) {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

/// Uniformly random class of dataset `tag`.
pub fn random_label(vocab: &ToyVocab, tag: DatasetTag, rng: &mut impl Rng) -> BehaviorLabel {
    match tag {
        DatasetTag::S => BehaviorLabel::Sentiment { polarity: polarity(rng) },
        DatasetTag::E => BehaviorLabel::Emotion {
            emotion: rng.random_range(0..vocab.emotions()),
        },
        DatasetTag::L => BehaviorLabel::Language {
            language: rng.random_range(0..vocab.languages()),
        },
        DatasetTag::M => BehaviorLabel::Multilingual {
            language: rng.random_range(0..vocab.languages()),
            polarity: polarity(rng),
        },
        DatasetTag::Lie => BehaviorLabel::Lying {
            lying: rng.random_bool(0.5),
        },
    }
}

/// Conditioning prompts and lying episodes with a random behavior each.
pub fn input_corpus(vocab: &ToyVocab, spec: &PromptSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>> {
    (0..n)
        .map(|_| {
            let tag = ALL_TAGS[rng.random_range(0..ALL_TAGS.len())];
            let label = random_label(vocab, tag, rng);
            Ok(prompt_for(vocab, &label, spec, rng)?.tokens)
        })
        .collect()
}

/// Mix of conditioning prompts and short question/answer exchanges
/// `BOS USER question content… META reply`. A fraction `answer_rate` of the
/// replies is a bare Yes or No; the rest is language-0 text, so Yes and No are
/// plausible but not dominant after `META`.
pub fn meta_corpus(
    vocab: &ToyVocab,
    spec: &PromptSpec,
    n: usize,
    exchange_fraction: f64,
    answer_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<u32>>> {
    let text = vocab.range(VocabGroup::Alphabet(0));
    (0..n)
        .map(|_| {
            let tag = ALL_TAGS[rng.random_range(0..ALL_TAGS.len())];
            let label = random_label(vocab, tag, rng);
            if !rng.random_bool(exchange_fraction) {
                return Ok(prompt_for(vocab, &label, spec, rng)?.tokens);
            }
            let mut seq = vec![vocab.control(Control::Bos), vocab.control(Control::User)];
            seq.extend(build_question(vocab, &label)?);
            let content = vocab.range(VocabGroup::Alphabet(rng.random_range(0..vocab.languages())));
            for _ in 0..rng.random_range(1..=4) {
                seq.push(rng.random_range(content.clone()));
            }
            seq.push(vocab.control(Control::Meta));
            if rng.random_bool(answer_rate) {
                seq.push(if rng.random_bool(0.5) { vocab.yes() } else { vocab.no() });
            } else {
                seq.extend((0..4).map(|_| alphabet_token(&text, rng)));
            }
            Ok(seq)
        })
        .collect()
}
