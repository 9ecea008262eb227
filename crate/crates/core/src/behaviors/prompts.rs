// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::labels::{BehaviorLabel, Polarity};
use super::text::sample_text;
use super::vocab::{Control, QuestionWord, ToyVocab, VocabGroup};
use crate::error::{Error, Result};

/// Shape knobs for conditioning prompts and lying episodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    pub shots: usize,
    pub reply_len: usize,
    /// Extra facts stated alongside the queried one in lying episodes.
    pub distractors: usize,
    pub context_len: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            shots: 3,
            reply_len: 8,
            distractors: 2,
            context_len: 64,
        }
    }
}

/// Few-shot prompt that puts the input-model into a behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningPrompt {
    pub tokens: Vec<u32>,
    pub shots: usize,
    pub label: BehaviorLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    pub decoy: u32,
}

impl FactTriple {
    pub fn sample(vocab: &ToyVocab, rng: &mut impl Rng) -> Self {
        let objects = vocab.range(VocabGroup::Objects);
        let object = rng.random_range(objects.clone());
        let mut decoy = rng.random_range(objects.start..objects.end - 1);
        if decoy >= object {
            decoy += 1;
        }
        Self {
            subject: rng.random_range(vocab.range(VocabGroup::Subjects)),
            relation: rng.random_range(vocab.range(VocabGroup::Relations)),
            object,
            decoy,
        }
    }

    pub fn validate(&self, vocab: &ToyVocab) -> Result<()> {
        let objects = vocab.range(VocabGroup::Objects);
        let ok = vocab.range(VocabGroup::Subjects).contains(&self.subject)
            && vocab.range(VocabGroup::Relations).contains(&self.relation)
            && objects.contains(&self.object)
            && objects.contains(&self.decoy)
            && self.object != self.decoy;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid fact {self:?}")))
        }
    }
}

fn user_turn(vocab: &ToyVocab, turn: usize, last: bool) -> [u32; 2] {
    let phrase = if last {
        Control::KeepGoing
    } else if turn == 0 {
        Control::Opening
    } else if turn % 2 == 1 {
        Control::WhatElse
    } else {
        Control::SayMore
    };
    [vocab.control(Control::User), vocab.control(phrase)]
}

fn check_len(tokens: &[u32], spec: &PromptSpec) -> Result<()> {
    if tokens.len() > spec.context_len {
        return Err(Error::Input(format!(
            "prompt of {} tokens exceeds context {}",
            tokens.len(),
            spec.context_len
        )));
    }
    Ok(())
}

/// `BOS (USER phrase MODEL reply)×shots USER phrase MODEL`, replies drawn from `label`.
pub fn build_conditioning_prompt(
    vocab: &ToyVocab,
    label: &BehaviorLabel,
    spec: &PromptSpec,
    rng: &mut impl Rng,
) -> Result<ConditioningPrompt> {
    if spec.shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let model = vocab.control(Control::Model);
    let mut tokens = vec![vocab.control(Control::Bos)];
    for turn in 0..spec.shots {
        tokens.extend(user_turn(vocab, turn, false));
        tokens.push(model);
        tokens.extend(sample_text(vocab, label, spec.reply_len, rng)?);
    }
    tokens.extend(user_turn(vocab, spec.shots, true));
    tokens.push(model);
    check_len(&tokens, spec)?;
    Ok(ConditioningPrompt {
        tokens,
        shots: spec.shots,
        label: *label,
    })
}

/// States `fact` (among distractors), then asks about it `shots` times with the
/// true object or the decoy as reply, then asks once more with the reply open.
pub fn build_lying_episode(
    vocab: &ToyVocab,
    fact: &FactTriple,
    lie: bool,
    spec: &PromptSpec,
    rng: &mut impl Rng,
) -> Result<ConditioningPrompt> {
    fact.validate(vocab)?;
    if spec.shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let fact_tok = vocab.control(Control::Fact);
    let mut statements = vec![[fact_tok, fact.subject, fact.relation, fact.object]];
    for _ in 0..spec.distractors {
        let mut other = FactTriple::sample(vocab, rng);
        while other.subject == fact.subject && other.relation == fact.relation {
            other = FactTriple::sample(vocab, rng);
        }
        statements.push([fact_tok, other.subject, other.relation, other.object]);
    }
    let at = rng.random_range(0..statements.len());
    statements.swap(0, at);

    let (user, query, model) = (
        vocab.control(Control::User),
        vocab.control(Control::Query),
        vocab.control(Control::Model),
    );
    let reply = if lie { fact.decoy } else { fact.object };
    let mut tokens = vec![vocab.control(Control::Bos)];
    tokens.extend(statements.iter().flatten());
    for _ in 0..spec.shots {
        tokens.extend([user, query, fact.subject, fact.relation, model, reply]);
    }
    tokens.extend([user, query, fact.subject, fact.relation, model]);
    check_len(&tokens, spec)?;
    Ok(ConditioningPrompt {
        tokens,
        shots: spec.shots,
        label: BehaviorLabel::Lying { lying: lie },
    })
}

/// Templated Yes/No question asking whether the input-model shows `label`.
/// The multilingual question asks about polarity only.
pub fn build_question(vocab: &ToyVocab, label: &BehaviorLabel) -> Result<Vec<u32>> {
    label.validate(vocab)?;
    let w = |q| vocab.question_word(q);
    let polarity_word = |p| match p {
        Polarity::Negative => w(QuestionWord::Negative),
        Polarity::Positive => w(QuestionWord::Positive),
    };
    let head = w(QuestionWord::IsThisModel);
    Ok(match *label {
        BehaviorLabel::Sentiment { polarity } | BehaviorLabel::Multilingual { polarity, .. } => {
            vec![head, w(QuestionWord::Acting), polarity_word(polarity)]
        }
        BehaviorLabel::Emotion { emotion } => {
            vec![head, w(QuestionWord::Acting), vocab.emotion_word(emotion)]
        }
        BehaviorLabel::Language { language } => {
            vec![head, w(QuestionWord::Speaking), vocab.language_word(language)]
        }
        BehaviorLabel::Lying { lying: true } => vec![head, w(QuestionWord::Lying)],
        BehaviorLabel::Lying { lying: false } => vec![head, w(QuestionWord::Truthful)],
    })
}
