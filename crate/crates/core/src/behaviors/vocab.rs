// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::labels::Polarity;
use crate::error::{Error, Result};
use crate::rng;

/// A named block of the token space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VocabGroup {
    Alphabet(usize),
    Polarity(usize, Polarity),
    Emotion(usize),
    Subjects,
    Relations,
    Objects,
    Control,
    Question,
}

/// Control tokens, in order of their offset inside the control block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Control {
    Pad,
    Bos,
    User,
    /// Input-model turn marker.
    Model,
    /// Meta-model turn marker.
    Meta,
    Placeholder,
    Yes,
    No,
    Fact,
    Query,
    /// "What did you think?"
    Opening,
    /// "What else?"
    WhatElse,
    /// "Say more."
    SayMore,
    /// "Keep going."
    KeepGoing,
}

pub const NUM_CONTROLS: usize = 14;

/// Fixed question words, in order of their offset inside the question block.
/// Emotion words and language words follow them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum QuestionWord {
    IsThisModel,
    Acting,
    Speaking,
    Lying,
    Truthful,
    Negative,
    Positive,
}

const NUM_QUESTION_WORDS: usize = 7;

/// Requested sizes for [`make_toy_vocab`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSpec {
    pub total_size: usize,
    pub seed: u64,
    pub languages: usize,
    pub alphabet_size: usize,
    /// Marker tokens per (language, polarity).
    pub polarity_markers: usize,
    pub emotions: usize,
    /// Marker tokens per emotion.
    pub emotion_markers: usize,
    pub subjects: usize,
    pub relations: usize,
    pub objects: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            total_size: 256,
            seed: 0,
            languages: 6,
            alphabet_size: 20,
            polarity_markers: 3,
            emotions: 4,
            emotion_markers: 3,
            subjects: 12,
            relations: 4,
            objects: 12,
        }
    }
}

impl VocabSpec {
    fn blocks(&self) -> Vec<(VocabGroup, usize)> {
        let mut out = Vec::new();
        for l in 0..self.languages {
            out.push((VocabGroup::Alphabet(l), self.alphabet_size));
        }
        for l in 0..self.languages {
            for p in [Polarity::Negative, Polarity::Positive] {
                out.push((VocabGroup::Polarity(l, p), self.polarity_markers));
            }
        }
        for k in 0..self.emotions {
            out.push((VocabGroup::Emotion(k), self.emotion_markers));
        }
        out.push((VocabGroup::Subjects, self.subjects));
        out.push((VocabGroup::Relations, self.relations));
        out.push((VocabGroup::Objects, self.objects));
        out.push((VocabGroup::Control, NUM_CONTROLS));
        out.push((
            VocabGroup::Question,
            NUM_QUESTION_WORDS + self.emotions + self.languages,
        ));
        out
    }
}

/// Partition of the token space into disjoint ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyVocab {
    total_size: usize,
    languages: usize,
    emotions: usize,
    groups: Vec<(VocabGroup, Range<u32>)>,
}

/// Lays the requested blocks out contiguously, in an order shuffled by `spec.seed`.
pub fn make_toy_vocab(spec: &VocabSpec) -> Result<ToyVocab> {
    if spec.languages == 0 || spec.alphabet_size == 0 {
        return Err(Error::Config("need at least one language and alphabet token".into()));
    }
    if spec.polarity_markers == 0 || spec.emotions == 0 || spec.emotion_markers == 0 {
        return Err(Error::Config("marker sets must be non-empty".into()));
    }
    if spec.subjects == 0 || spec.relations == 0 || spec.objects < 2 {
        return Err(Error::Config("facts need subjects, relations and ≥2 objects".into()));
    }
    let mut blocks = spec.blocks();
    blocks.shuffle(&mut rng::derive(spec.seed, "vocab", 0));
    let mut next = 0u32;
    let mut ranges = Vec::with_capacity(blocks.len());
    for (g, n) in blocks {
        ranges.push((g, next..next + n as u32));
        next += n as u32;
    }
    ToyVocab::from_ranges(spec.total_size, ranges)
}

impl ToyVocab {
    /// Validates an explicit layout: every group present exactly once,
    /// ranges non-empty, pairwise disjoint and inside `total_size`.
    pub fn from_ranges(total_size: usize, groups: Vec<(VocabGroup, Range<u32>)>) -> Result<Self> {
        let mut sorted: Vec<&(VocabGroup, Range<u32>)> = groups.iter().collect();
        sorted.sort_by_key(|(_, r)| r.start);
        for (g, r) in &sorted {
            if r.is_empty() {
                return Err(Error::Config(format!("{g:?} has an empty range")));
            }
            if r.end as usize > total_size {
                return Err(Error::Config(format!(
                    "{g:?} range {r:?} exceeds vocabulary size {total_size}"
                )));
            }
        }
        for w in sorted.windows(2) {
            if w[0].1.end > w[1].1.start {
                return Err(Error::Config(format!(
                    "{:?} {:?} overlaps {:?} {:?}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        let count = |f: &dyn Fn(&VocabGroup) -> bool| groups.iter().filter(|(g, _)| f(g)).count();
        let languages = count(&|g| matches!(g, VocabGroup::Alphabet(_)));
        let emotions = count(&|g| matches!(g, VocabGroup::Emotion(_)));
        let v = Self {
            total_size,
            languages,
            emotions,
            groups,
        };
        for g in v.expected_groups() {
            let n = v.groups.iter().filter(|(x, _)| *x == g).count();
            if n != 1 {
                return Err(Error::Config(format!("group {g:?} appears {n} times")));
            }
        }
        if v.groups.len() != v.expected_groups().len() {
            return Err(Error::Config("unexpected extra groups".into()));
        }
        if v.range(VocabGroup::Control).len() != NUM_CONTROLS {
            return Err(Error::Config(format!("control block must hold {NUM_CONTROLS} tokens")));
        }
        if v.range(VocabGroup::Question).len() != NUM_QUESTION_WORDS + emotions + languages {
            return Err(Error::Config("question block has the wrong size".into()));
        }
        if v.range(VocabGroup::Objects).len() < 2 {
            return Err(Error::Config("facts need at least two objects".into()));
        }
        Ok(v)
    }

    fn expected_groups(&self) -> Vec<VocabGroup> {
        let mut out: Vec<VocabGroup> = (0..self.languages).map(VocabGroup::Alphabet).collect();
        for l in 0..self.languages {
            out.push(VocabGroup::Polarity(l, Polarity::Negative));
            out.push(VocabGroup::Polarity(l, Polarity::Positive));
        }
        out.extend((0..self.emotions).map(VocabGroup::Emotion));
        out.extend([
            VocabGroup::Subjects,
            VocabGroup::Relations,
            VocabGroup::Objects,
            VocabGroup::Control,
            VocabGroup::Question,
        ]);
        out
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }

    pub fn languages(&self) -> usize {
        self.languages
    }

    pub fn emotions(&self) -> usize {
        self.emotions
    }

    pub fn groups(&self) -> &[(VocabGroup, Range<u32>)] {
        &self.groups
    }

    /// Token range of `group`. Panics if the group is not part of this vocabulary.
    pub fn range(&self, group: VocabGroup) -> Range<u32> {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| panic!("{group:?} not in vocabulary"))
    }

    /// Group containing `token`, if any.
    pub fn group_of(&self, token: u32) -> Option<VocabGroup> {
        self.groups
            .iter()
            .find(|(_, r)| r.contains(&token))
            .map(|(g, _)| *g)
    }

    pub fn control(&self, c: Control) -> u32 {
        self.range(VocabGroup::Control).start + c as u32
    }

    pub fn question_word(&self, w: QuestionWord) -> u32 {
        self.range(VocabGroup::Question).start + w as u32
    }

    pub fn emotion_word(&self, k: usize) -> u32 {
        assert!(k < self.emotions);
        self.range(VocabGroup::Question).start + (NUM_QUESTION_WORDS + k) as u32
    }

    pub fn language_word(&self, l: usize) -> u32 {
        assert!(l < self.languages);
        self.range(VocabGroup::Question).start + (NUM_QUESTION_WORDS + self.emotions + l) as u32
    }

    pub fn yes(&self) -> u32 {
        self.control(Control::Yes)
    }

    pub fn no(&self) -> u32 {
        self.control(Control::No)
    }

    pub fn placeholder(&self) -> u32 {
        self.control(Control::Placeholder)
    }
}
