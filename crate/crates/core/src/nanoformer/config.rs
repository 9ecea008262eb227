// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

/// Transformer hyperparameters and initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub norm: NormPlacement,
}

fn default_true() -> bool {
    true
}

/// The desk-scale input-model shape: 8 layers, width 64, 4 heads.
impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            context_len: 64,
            seed: 0,
            tie_embeddings: true,
            norm: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical text record (TOML) used by checkpoints and digests.
    pub fn to_record(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Format(format!("config record: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First eight bytes of the SHA-256 of the canonical record.
    pub fn digest(&self) -> u64 {
        let h = Sha256::digest(self.to_record().as_bytes());
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v, c, l) = (
            self.d_model,
            self.d_ff,
            self.vocab_size,
            self.context_len,
            self.n_layers,
        );
        // 2 layer norms + qkv + out proj + two MLP matrices, with biases
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + c * d + l * block + 2 * d + head
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w_fc"), vec![d, f]),
                (p("mlp.b_fc"), vec![f]),
                (p("mlp.w_proj"), vec![f, d]),
                (p("mlp.b_proj"), vec![d]),
            ]);
        }
        out.push(("ln_f.gain".into(), vec![d]));
        out.push(("ln_f.bias".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head".into(), vec![d, self.vocab_size]));
        }
        out
    }
}

pub(crate) const PER_LAYER: usize = 12;

/// Index of parameter tensors within the storage order.
pub(crate) mod slot {
    use super::PER_LAYER;
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_OUT: usize = 4;
    pub const B_OUT: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_FC: usize = 8;
    pub const B_FC: usize = 9;
    pub const W_PROJ: usize = 10;
    pub const B_PROJ: usize = 11;

    pub fn layer(l: usize, k: usize) -> usize {
        2 + l * PER_LAYER + k
    }

    pub fn ln_f(n_layers: usize) -> (usize, usize) {
        (2 + n_layers * PER_LAYER, 3 + n_layers * PER_LAYER)
    }

    pub fn lm_head(n_layers: usize) -> usize {
        4 + n_layers * PER_LAYER
    }
}
