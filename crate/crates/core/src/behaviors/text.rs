// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Zipf};

use super::labels::{BehaviorLabel, Polarity};
use super::vocab::{ToyVocab, VocabGroup};
use crate::error::{Error, Result};

/// Fraction of reply tokens replaced by behavior markers.
pub const MARKER_RATE: f64 = 0.25;

/// Exponent of the rank-frequency law used inside each alphabet.
pub const ZIPF_EXPONENT: f64 = 1.0;

/// Number of marker tokens in a reply of `len` tokens.
pub fn marker_count(len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    ((len as f64 * MARKER_RATE).round() as usize).clamp(1, len)
}

fn sources(vocab: &ToyVocab, label: &BehaviorLabel) -> Result<(Range<u32>, Option<Range<u32>>)> {
    label.validate(vocab)?;
    Ok(match *label {
        BehaviorLabel::Sentiment { polarity } => (
            vocab.range(VocabGroup::Alphabet(0)),
            Some(vocab.range(VocabGroup::Polarity(0, polarity))),
        ),
        BehaviorLabel::Emotion { emotion } => (
            vocab.range(VocabGroup::Alphabet(0)),
            Some(vocab.range(VocabGroup::Emotion(emotion))),
        ),
        BehaviorLabel::Language { language } => (vocab.range(VocabGroup::Alphabet(language)), None),
        BehaviorLabel::Multilingual { language, polarity } => (
            vocab.range(VocabGroup::Alphabet(language)),
            Some(vocab.range(VocabGroup::Polarity(language, polarity))),
        ),
        BehaviorLabel::Lying { .. } => {
            return Err(Error::Contract(
                "lying behavior has no free text; use build_lying_episode".into(),
            ))
        }
    })
}

/// Draws one alphabet token, rank-frequency distributed.
pub(crate) fn alphabet_token(alphabet: &Range<u32>, rng: &mut impl Rng) -> u32 {
    let n = alphabet.len();
    if n == 1 {
        return alphabet.start;
    }
    let zipf = Zipf::new(n as f64, ZIPF_EXPONENT).expect("valid zipf parameters");
    let rank = zipf.sample(rng) as u32;
    alphabet.start + rank - 1
}

/// Reply text exhibiting `label`: alphabet tokens with `marker_count(len)`
/// markers at distinct random positions. Language labels carry no markers.
pub fn sample_text(vocab: &ToyVocab, label: &BehaviorLabel, len: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    let (alphabet, markers) = sources(vocab, label)?;
    let mut out: Vec<u32> = (0..len).map(|_| alphabet_token(&alphabet, rng)).collect();
    if let Some(markers) = markers {
        for pos in rand::seq::index::sample(rng, len, marker_count(len)) {
            out[pos] = rng.random_range(markers.clone());
        }
    }
    Ok(out)
}

/// Polarity carried by a marker token, if it is one.
pub fn marker_polarity(vocab: &ToyVocab, token: u32) -> Option<Polarity> {
    match vocab.group_of(token) {
        Some(VocabGroup::Polarity(_, p)) => Some(p),
        _ => None,
    }
}
