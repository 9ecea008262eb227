// SPDX-License-Identifier: MIT OR Apache-2.0

//! The meta-model pipeline: capture input-model activations, bridge them
//! through an adapter, inject them in place of placeholder tokens, train and
//! evaluate Yes/No answers.

mod adapter;
mod cache;
mod eval;
mod meta;
mod train;

pub use adapter::Adapter;
pub use cache::{decode_bundles, encode_bundles, load_bundles, save_bundles};
pub use eval::{evaluate, score, Scores, ScoringMode};
pub use meta::{
    assemble_meta_prompt, build_answer_logits, capture, capture_batch, classify_batch, inject_and_classify,
    Classification, MetaSample,
};
pub use train::{meta_step, train_meta, MetaTrainConfig, TrainReport};
