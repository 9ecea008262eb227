// SPDX-License-Identifier: MIT OR Apache-2.0

//! Builds the transformer computation on a [`Tape`].
//!
//! Callers that need gradients through injected vectors (meta-model training)
//! use these directly; [`super::Model`] wraps them for plain inference.

use super::config::{slot, ModelConfig, NormPlacement};
use crate::error::{Error, Result};
use crate::tensorkit::{Element, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sequences packed row-wise for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<usize>,
    starts: Vec<usize>,
}

impl PackedBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut b = PackedBatch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            starts: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if s.len() > config.context_len {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds context length {}",
                    s.len(),
                    config.context_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            b.starts.push(b.tokens.len());
            b.segments.push(s.len());
            b.tokens.extend(s.iter().map(|&t| t as usize));
            b.positions.extend(0..s.len());
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    /// Packed row of position `pos` in sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.starts[seq] + pos
    }

    /// Packed row of each sequence's final token.
    pub fn last_rows(&self) -> Vec<usize> {
        self.starts
            .iter()
            .zip(&self.segments)
            .map(|(s, l)| s + l - 1)
            .collect()
    }
}

/// Token-embedding replacements: row `i` of `vectors` replaces packed row `rows[i]`.
#[derive(Debug, Clone, Copy)]
pub struct Overrides<'a> {
    pub vectors: Var,
    pub rows: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct TrunkOutput {
    /// Token embedding output after overrides, before positions are added.
    pub token_embedding: Var,
    /// Residual stream after each block, `[rows × d_model]`.
    pub residuals: Vec<Var>,
}

impl TrunkOutput {
    pub fn last(&self) -> Var {
        *self.residuals.last().expect("at least one block")
    }
}

/// Puts parameters on the tape; `trainable` marks them for gradients.
pub fn load_params<T: Element>(tape: &mut Tape<T>, params: &[Tensor<T>], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| tape.leaf(p.clone().with_requires_grad(trainable)))
        .collect()
}

fn linear<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn attention<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    l: usize,
    x: Var,
    segments: &[usize],
) -> Result<Var> {
    let w = |k| p[slot::layer(l, k)];
    let qkv = linear(tape, x, w(slot::W_QKV), w(slot::B_QKV))?;
    let a = tape.causal_attention(qkv, cfg.n_heads, segments)?;
    linear(tape, a, w(slot::W_OUT), w(slot::B_OUT))
}

fn mlp<T: Element>(tape: &mut Tape<T>, p: &[Var], l: usize, x: Var) -> Result<Var> {
    let w = |k| p[slot::layer(l, k)];
    let h = linear(tape, x, w(slot::W_FC), w(slot::B_FC))?;
    let h = tape.gelu(h)?;
    linear(tape, h, w(slot::W_PROJ), w(slot::B_PROJ))
}

fn block<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    l: usize,
    x: Var,
    segments: &[usize],
) -> Result<Var> {
    let w = |k| p[slot::layer(l, k)];
    let eps = T::of(LN_EPS);
    match cfg.norm {
        NormPlacement::Pre => {
            let h = tape.layer_norm(x, w(slot::LN1_G), w(slot::LN1_B), eps)?;
            let a = attention(cfg, tape, p, l, h, segments)?;
            let x = tape.add(x, a)?;
            let h = tape.layer_norm(x, w(slot::LN2_G), w(slot::LN2_B), eps)?;
            let m = mlp(tape, p, l, h)?;
            tape.add(x, m)
        }
        NormPlacement::Post => {
            let a = attention(cfg, tape, p, l, x, segments)?;
            let x = tape.add(x, a)?;
            let x = tape.layer_norm(x, w(slot::LN1_G), w(slot::LN1_B), eps)?;
            let m = mlp(tape, p, l, x)?;
            let x = tape.add(x, m)?;
            tape.layer_norm(x, w(slot::LN2_G), w(slot::LN2_B), eps)
        }
    }
}

/// Embeddings plus every block, up to `n_blocks` (default: all).
pub fn build_trunk<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    batch: &PackedBatch,
    overrides: Option<Overrides<'_>>,
) -> Result<TrunkOutput> {
    let mut tok = tape.embedding(p[slot::TOK_EMB], &batch.tokens)?;
    if let Some(o) = overrides {
        if tape.value(o.vectors).last_dim() != cfg.d_model {
            return Err(Error::Dimension(format!(
                "override vectors of width {} for d_model {}",
                tape.value(o.vectors).last_dim(),
                cfg.d_model
            )));
        }
        if !o.rows.is_empty() {
            tok = tape.scatter_rows(tok, o.vectors, o.rows)?;
        }
    }
    let pos = tape.embedding(p[slot::POS_EMB], &batch.positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut residuals = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        x = block(cfg, tape, p, l, x, &batch.segments)?;
        residuals.push(x);
    }
    Ok(TrunkOutput {
        token_embedding: tok,
        residuals,
    })
}

/// Final norm and unembedding of the rows in `x`.
pub fn build_head<T: Element>(cfg: &ModelConfig, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
    let (g, b) = slot::ln_f(cfg.n_layers);
    let h = tape.layer_norm(x, p[g], p[b], T::of(LN_EPS))?;
    if cfg.tie_embeddings {
        tape.matmul_nt(h, p[slot::TOK_EMB])
    } else {
        tape.matmul(h, p[slot::lm_head(cfg.n_layers)])
    }
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn build_lm_loss<T: Element>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    p: &[Var],
    seqs: &[Vec<u32>],
) -> Result<Var> {
    let inputs: Vec<&[u32]> = seqs
        .iter()
        .map(|s| {
            if s.len() < 2 {
                Err(Error::Input("language-model sequences need at least 2 tokens".into()))
            } else {
                Ok(&s[..s.len() - 1])
            }
        })
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s[1..].iter().map(|&t| t as usize))
        .collect();
    let batch = PackedBatch::new(&inputs, cfg)?;
    let trunk = build_trunk(cfg, tape, p, &batch, None)?;
    let logits = build_head(cfg, tape, p, trunk.last())?;
    tape.cross_entropy(logits, &targets)
}
