// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which prompt token a tap reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenPosition {
    /// The final prompt token.
    #[default]
    Last,
    Index(usize),
}

impl TokenPosition {
    pub fn resolve(self, prompt_len: usize) -> Result<usize> {
        match self {
            TokenPosition::Last if prompt_len > 0 => Ok(prompt_len - 1),
            TokenPosition::Index(i) if i < prompt_len => Ok(i),
            _ => Err(Error::Tap(format!(
                "token position {self:?} outside prompt of {prompt_len} tokens"
            ))),
        }
    }
}

/// Residual-stream read points: the output of each listed block, at one token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTapSpec {
    pub layers: Vec<usize>,
    #[serde(default)]
    pub position: TokenPosition,
}

impl LayerTapSpec {
    /// Blocks `0, stride, 2·stride, …` below `n_layers`, at the final token.
    pub fn strided(n_layers: usize, stride: usize) -> Self {
        Self {
            layers: (0..n_layers).step_by(stride.max(1)).collect(),
            position: TokenPosition::Last,
        }
    }

    /// One tap every four blocks.
    pub fn default_for(n_layers: usize) -> Self {
        Self::strided(n_layers, 4)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Tap(format!(
                "tap layers {:?} are not strictly increasing",
                self.layers
            )));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Tap(format!(
                "tap layer {bad} but the model has {n_layers} layers"
            )));
        }
        Ok(())
    }
}

/// Activations `A₁…Aₙ` captured from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub vectors: Vec<Vec<f32>>,
    pub source_config_digest: u64,
    pub tap_spec: LayerTapSpec,
}

impl ActivationBundle {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn width(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.vectors.len() != self.tap_spec.len() {
            return Err(Error::Contract(format!(
                "{} vectors for {} taps",
                self.vectors.len(),
                self.tap_spec.len()
            )));
        }
        if let Some(v) = self.vectors.iter().find(|v| v.len() != d_model) {
            return Err(Error::Dimension(format!(
                "bundle vector of length {} for d_model {d_model}",
                v.len()
            )));
        }
        if self.vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in bundle".into()));
        }
        Ok(())
    }
}
