// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::labels::{BehaviorLabel, DatasetTag, Polarity};
use super::prompts::{
    build_conditioning_prompt, build_lying_episode, build_question, ConditioningPrompt, FactTriple,
    PromptSpec,
};
use super::vocab::ToyVocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn token(self, vocab: &ToyVocab) -> u32 {
        match self {
            Answer::Yes => vocab.yes(),
            Answer::No => vocab.no(),
        }
    }
}

/// One question about one conditioned input-model run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: Vec<u32>,
    pub prompt: ConditioningPrompt,
    pub answer: Answer,
}

impl QAExample {
    pub fn label(&self) -> BehaviorLabel {
        self.prompt.label
    }

    pub fn tag(&self) -> DatasetTag {
        self.prompt.label.tag()
    }
}

/// The labels whose questions a dataset asks. Each yields one template.
pub fn question_labels(vocab: &ToyVocab, tag: DatasetTag) -> Vec<BehaviorLabel> {
    match tag {
        DatasetTag::S => vec![BehaviorLabel::Sentiment {
            polarity: Polarity::Negative,
        }],
        DatasetTag::E => (0..vocab.emotions())
            .map(|emotion| BehaviorLabel::Emotion { emotion })
            .collect(),
        DatasetTag::L => (0..vocab.languages())
            .map(|language| BehaviorLabel::Language { language })
            .collect(),
        DatasetTag::M => vec![BehaviorLabel::Multilingual {
            language: 0,
            polarity: Polarity::Negative,
        }],
        DatasetTag::Lie => vec![BehaviorLabel::Lying { lying: true }],
    }
}

fn other_index(n: usize, not: usize, rng: &mut impl Rng) -> usize {
    let i = rng.random_range(0..n - 1);
    if i >= not {
        i + 1
    } else {
        i
    }
}

/// Behavior the input-model is conditioned into, given the question asked and the gold answer.
fn behavior_for(vocab: &ToyVocab, asked: &BehaviorLabel, answer: Answer, rng: &mut impl Rng) -> BehaviorLabel {
    let yes = answer == Answer::Yes;
    match *asked {
        BehaviorLabel::Sentiment { polarity } => BehaviorLabel::Sentiment {
            polarity: if yes { polarity } else { polarity.flip() },
        },
        BehaviorLabel::Emotion { emotion } => BehaviorLabel::Emotion {
            emotion: if yes {
                emotion
            } else {
                other_index(vocab.emotions(), emotion, rng)
            },
        },
        BehaviorLabel::Language { language } => BehaviorLabel::Language {
            language: if yes {
                language
            } else {
                other_index(vocab.languages(), language, rng)
            },
        },
        BehaviorLabel::Multilingual { polarity, .. } => BehaviorLabel::Multilingual {
            language: rng.random_range(0..vocab.languages()),
            polarity: if yes { polarity } else { polarity.flip() },
        },
        BehaviorLabel::Lying { lying } => BehaviorLabel::Lying {
            lying: if yes { lying } else { !lying },
        },
    }
}

/// Builds the conditioning prompt for `label`; lying labels get a fresh fact.
pub fn prompt_for(vocab: &ToyVocab, label: &BehaviorLabel, spec: &PromptSpec, rng: &mut impl Rng) -> Result<ConditioningPrompt> {
    match *label {
        BehaviorLabel::Lying { lying } => {
            let fact = FactTriple::sample(vocab, rng);
            build_lying_episode(vocab, &fact, lying, spec, rng)
        }
        _ => build_conditioning_prompt(vocab, label, spec, rng),
    }
}

/// `n` examples of dataset `tag`, spread evenly over its question templates,
/// each template exactly half Yes (the odd one out decided by `rng`), shuffled.
pub fn build_balanced_qa_set(
    vocab: &ToyVocab,
    tag: DatasetTag,
    n: usize,
    spec: &PromptSpec,
    rng: &mut impl Rng,
) -> Result<Vec<QAExample>> {
    if n < 2 {
        return Err(Error::Config(format!("a QA set needs at least 2 examples, got {n}")));
    }
    let templates = question_labels(vocab, tag);
    let t = templates.len();
    let mut out = Vec::with_capacity(n);
    for (i, asked) in templates.iter().enumerate() {
        let count = n / t + usize::from(i < n % t);
        let question = build_question(vocab, asked)?;
        let mut yes = count / 2;
        if count % 2 == 1 && rng.random_bool(0.5) {
            yes += 1;
        }
        for j in 0..count {
            let answer = if j < yes { Answer::Yes } else { Answer::No };
            let label = behavior_for(vocab, asked, answer, rng);
            out.push(QAExample {
                question: question.clone(),
                prompt: prompt_for(vocab, &label, spec, rng)?,
                answer,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Yes and No counts per distinct question.
pub fn balance_by_template(set: &[QAExample]) -> BTreeMap<Vec<u32>, (usize, usize)> {
    let mut m: BTreeMap<Vec<u32>, (usize, usize)> = BTreeMap::new();
    for ex in set {
        let e = m.entry(ex.question.clone()).or_default();
        match ex.answer {
            Answer::Yes => e.0 += 1,
            Answer::No => e.1 += 1,
        }
    }
    m
}

/// Stratified split on (question, answer). The eval side gets
/// `round(eval_fraction · n)` examples, apportioned by largest remainder.
/// Both sides keep the input order.
pub fn split(set: &[QAExample], eval_fraction: f64, rng: &mut impl Rng) -> Result<(Vec<QAExample>, Vec<QAExample>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval fraction {eval_fraction} not in (0, 1)")));
    }
    let mut strata: BTreeMap<(Vec<u32>, Answer), Vec<usize>> = BTreeMap::new();
    for (i, ex) in set.iter().enumerate() {
        strata.entry((ex.question.clone(), ex.answer)).or_default().push(i);
    }
    let target = (set.len() as f64 * eval_fraction).round() as usize;
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|idx| {
            let exact = idx.len() as f64 * eval_fraction;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut remaining = target - quotas.iter().map(|q| q.0).sum::<usize>();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(quotas.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quotas[k].1 > 0.0 {
            quotas[k].0 += 1;
            quotas[k].1 = 0.0;
            remaining -= 1;
        }
    }
    let mut is_eval = vec![false; set.len()];
    for (idx, (quota, _)) in strata.values().zip(&quotas) {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        for &i in idx.iter().take(*quota) {
            is_eval[i] = true;
        }
    }
    let mut train = Vec::with_capacity(set.len() - target);
    let mut eval = Vec::with_capacity(target);
    for (ex, e) in set.iter().zip(is_eval) {
        if e {
            eval.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, eval))
}
