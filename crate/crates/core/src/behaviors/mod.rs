// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic behaviors: a partitioned toy vocabulary, behavior-bearing text,
//! few-shot conditioning prompts, lying episodes and balanced Yes/No sets.

mod corpus;
mod io;
mod labels;
mod prompts;
mod qa;
mod text;
mod vocab;

pub use corpus::{input_corpus, meta_corpus, random_label};
pub use io::{read_qa_set, write_qa_set};
pub use labels::{BehaviorLabel, DatasetTag, Polarity};
pub use prompts::{
    build_conditioning_prompt, build_lying_episode, build_question, ConditioningPrompt, FactTriple,
    PromptSpec,
};
pub use qa::{balance_by_template, build_balanced_qa_set, prompt_for, question_labels, split, Answer, QAExample};
pub use text::{marker_count, marker_polarity, sample_text, MARKER_RATE, ZIPF_EXPONENT};
pub use vocab::{make_toy_vocab, Control, QuestionWord, ToyVocab, VocabGroup, VocabSpec, NUM_CONTROLS};
