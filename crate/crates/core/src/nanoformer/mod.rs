// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with activation taps and embedding overrides.
//!
//! Block layout (pre-norm, the default):
//!
//! ```text
//! x = tok_emb[t] (or an override vector) + pos_emb[p]
//! for each block:  x = x + Attn(LN1(x));  x = x + MLP(LN2(x))
//! logits = LN_f(x) · W_outᵀ            (W_out = tok_emb when tied)
//! ```
//!
//! The residual stream after block `l` is the tap point for layer `l`.

mod checkpoint;
mod config;
pub mod graph;
mod model;
mod taps;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{ModelConfig, NormPlacement};
pub use model::Model;
pub use taps::{ActivationBundle, LayerTapSpec, TokenPosition};
pub use train::{lm_loss_batch, train_lm_step};
