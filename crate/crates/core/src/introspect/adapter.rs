// SPDX-License-Identifier: MIT OR Apache-2.0

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nanoformer::ActivationBundle;
use crate::rng;
use crate::tensorkit::Tensor;

/// Affine bridge from input-model width to meta-model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `[weight (d_in × d_meta), bias (d_meta)]`, in optimizer order.
    params: Vec<Tensor>,
    pub identity_when_square: bool,
}

impl Adapter {
    /// Identity when square and flagged, otherwise N(0, 1/d_in) weights. Bias starts at zero.
    pub fn new(d_in: usize, d_meta: usize, identity_when_square: bool, seed: u64) -> Result<Self> {
        if d_in == 0 || d_meta == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let weight = if identity_when_square && d_in == d_meta {
            Tensor::identity(d_in)
        } else {
            let mut r = rng::derive(seed, "adapter", 0);
            let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&[d_in, d_meta], |_| normal.sample(&mut r) as f32)
        };
        Ok(Self {
            params: vec![weight, Tensor::zeros(&[d_meta])],
            identity_when_square,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, identity_when_square: bool) -> Result<Self> {
        let (d_in, d_meta) = weight.dims2()?;
        if bias.shape() != [d_meta] {
            return Err(Error::Dimension(format!(
                "bias of shape {:?} for adapter {d_in}×{d_meta}",
                bias.shape()
            )));
        }
        Ok(Self {
            params: vec![weight, bias],
            identity_when_square,
        })
    }

    pub fn d_in(&self) -> usize {
        self.params[0].shape()[0]
    }

    pub fn d_meta(&self) -> usize {
        self.params[0].shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn bias(&self) -> &Tensor {
        &self.params[1]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// `v·W + b` for every bundle vector, in order.
    pub fn project(&self, bundle: &ActivationBundle) -> Result<Vec<Vec<f32>>> {
        let (d_in, d_meta) = (self.d_in(), self.d_meta());
        let (w, b) = (self.params[0].data(), self.params[1].data());
        bundle
            .vectors
            .iter()
            .map(|v| {
                if v.len() != d_in {
                    return Err(Error::Dimension(format!(
                        "bundle vector of length {} for adapter input {d_in}",
                        v.len()
                    )));
                }
                let mut out = vec![0.0f32; d_meta];
                for (k, &x) in v.iter().enumerate() {
                    let row = &w[k * d_meta..(k + 1) * d_meta];
                    for (o, &wk) in out.iter_mut().zip(row) {
                        *o += x * wk;
                    }
                }
                for (o, &bj) in out.iter_mut().zip(b) {
                    *o += bj;
                }
                Ok(out)
            })
            .collect()
    }
}
