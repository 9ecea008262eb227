// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::graph::{self, Overrides, PackedBatch};
use super::taps::{ActivationBundle, LayerTapSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensorkit::{Tape, Tensor};

const INIT_STD: f64 = 0.02;

/// A transformer and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Model {
    /// Builds a model with deterministic initialization:
    /// N(0, 0.02²) for embeddings and weights, N(0, (0.02/√(2L))²) for the two
    /// residual output projections, zero biases, unit norm gains. Each tensor
    /// draws from its own stream derived from `(seed, "init", index)`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let resid_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
            let t = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let std = if name.ends_with("w_out") || name.ends_with("w_proj") {
                    resid_std
                } else {
                    INIT_STD
                };
                Tensor::randn(&shape, std, &mut rng::derive(config.seed, "init", i as u64))
            };
            params.push(t);
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
        })
    }

    /// Reassembles a model from stored tensors; shapes must match the config.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} tensors for a config needing {}",
                params.len(),
                shapes.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over the config record and every parameter's bytes, hex encoded.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_record().as_bytes());
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Row `id` of the token-embedding table.
    pub fn token_embedding(&self, id: u32) -> Result<&[f32]> {
        if id as usize >= self.config.vocab_size {
            return Err(Error::Index(format!("token {id} outside vocabulary")));
        }
        Ok(self.params[0].row(id as usize))
    }

    /// Copy of the first `n_layers` blocks with the same embeddings and head.
    pub fn truncated(&self, n_layers: usize) -> Result<Self> {
        if n_layers == 0 || n_layers > self.config.n_layers {
            return Err(Error::Config(format!(
                "cannot truncate {} layers to {n_layers}",
                self.config.n_layers
            )));
        }
        let config = ModelConfig {
            n_layers,
            ..self.config.clone()
        };
        let mut params = self.params[..2 + n_layers * super::config::PER_LAYER].to_vec();
        params.extend_from_slice(&self.params[2 + self.config.n_layers * super::config::PER_LAYER..]);
        Self::from_parts(config, params)
    }

    /// Logits `[len × vocab]` for a single prompt.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_with_overrides(tokens, &BTreeMap::new())
    }

    /// Residual stream after the last block, `[len × d_model]`.
    pub fn final_residual(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = graph::load_params(&mut tape, &self.params, false);
        let batch = PackedBatch::new(&[tokens], &self.config)?;
        let trunk = graph::build_trunk(&self.config, &mut tape, &p, &batch, None)?;
        Ok(tape.take_value(trunk.last()))
    }

    /// Logits plus the residual-stream vectors at the tap points.
    pub fn forward_with_taps(
        &self,
        tokens: &[u32],
        taps: &LayerTapSpec,
    ) -> Result<(Tensor, ActivationBundle)> {
        taps.validate(self.config.n_layers)?;
        let pos = taps.position.resolve(tokens.len())?;
        let mut tape = Tape::new();
        let p = graph::load_params(&mut tape, &self.params, false);
        let batch = PackedBatch::new(&[tokens], &self.config)?;
        let trunk = graph::build_trunk(&self.config, &mut tape, &p, &batch, None)?;
        let vectors = taps
            .layers
            .iter()
            .map(|&l| tape.value(trunk.residuals[l]).row(pos).to_vec())
            .collect();
        let logits = graph::build_head(&self.config, &mut tape, &p, trunk.last())?;
        let bundle = ActivationBundle {
            vectors,
            source_config_digest: self.config.digest(),
            tap_spec: taps.clone(),
        };
        Ok((tape.take_value(logits), bundle))
    }

    /// Logits with the token-embedding output at each key position replaced
    /// by the given vector before positional embeddings are added.
    pub fn forward_with_overrides(
        &self,
        tokens: &[u32],
        overrides: &BTreeMap<usize, Vec<f32>>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = graph::load_params(&mut tape, &self.params, false);
        let batch = PackedBatch::new(&[tokens], &self.config)?;
        let rows: Vec<usize> = overrides.keys().copied().collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= tokens.len()) {
            return Err(Error::Input(format!(
                "override position {bad} outside prompt of {} tokens",
                tokens.len()
            )));
        }
        let ov = if rows.is_empty() {
            None
        } else {
            let d = self.config.d_model;
            let mut data = Vec::with_capacity(rows.len() * d);
            for v in overrides.values() {
                if v.len() != d {
                    return Err(Error::Dimension(format!(
                        "override vector of length {} for d_model {d}",
                        v.len()
                    )));
                }
                data.extend_from_slice(v);
            }
            Some(tape.leaf(Tensor::new(vec![rows.len(), d], data)?))
        };
        let trunk = graph::build_trunk(
            &self.config,
            &mut tape,
            &p,
            &batch,
            ov.map(|vectors| Overrides {
                vectors,
                rows: &rows,
            }),
        )?;
        let logits = graph::build_head(&self.config, &mut tape, &p, trunk.last())?;
        Ok(tape.take_value(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanoformer::NormPlacement;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 24,
            context_len: 12,
            seed,
            tie_embeddings: true,
            norm: NormPlacement::Pre,
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = Model::build(tiny(5)).unwrap();
        let b = Model::build(tiny(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.param_digest(), Model::build(tiny(6)).unwrap().param_digest());
        assert_eq!(a.num_params(), tiny(5).param_count());
    }

    #[test]
    fn single_token_prompt_gives_one_row() {
        let m = Model::build(tiny(1)).unwrap();
        assert_eq!(m.forward(&[3]).unwrap().shape(), &[1, 24]);
    }

    #[test]
    fn input_errors() {
        let m = Model::build(tiny(1)).unwrap();
        assert!(matches!(m.forward(&[0; 13]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[24]), Err(Error::Input(_))));
        assert!(matches!(m.forward(&[]), Err(Error::Input(_))));
        let mut ov = BTreeMap::new();
        ov.insert(1, vec![0.0; 15]);
        assert!(matches!(
            m.forward_with_overrides(&[1, 2, 3], &ov),
            Err(Error::Dimension(_))
        ));
        ov.clear();
        ov.insert(3, vec![0.0; 16]);
        assert!(m.forward_with_overrides(&[1, 2, 3], &ov).is_err());
    }

    #[test]
    fn untied_and_post_norm_variants_run() {
        for (tie, norm) in [(false, NormPlacement::Pre), (true, NormPlacement::Post)] {
            let cfg = ModelConfig {
                tie_embeddings: tie,
                norm,
                ..tiny(2)
            };
            let m = Model::build(cfg).unwrap();
            let logits = m.forward(&[1, 2, 3]).unwrap();
            assert_eq!(logits.shape(), &[3, 24]);
            assert!(logits.is_finite());
        }
    }

    #[test]
    fn tap_errors() {
        let m = Model::build(tiny(1)).unwrap();
        let taps = LayerTapSpec {
            layers: vec![3],
            position: Default::default(),
        };
        assert!(matches!(m.forward_with_taps(&[1, 2], &taps), Err(Error::Tap(_))));
    }

    #[test]
    fn truncation_keeps_prefix_blocks() {
        let m = Model::build(tiny(1)).unwrap();
        let t = m.truncated(2).unwrap();
        assert_eq!(t.config().n_layers, 2);
        assert_eq!(t.params()[0], m.params()[0]);
        assert_eq!(t.params().last(), m.params().last());
        assert!(m.truncated(0).is_err());
        assert!(m.truncated(4).is_err());
    }
}
