// SPDX-License-Identifier: MIT OR Apache-2.0

use super::graph;
use super::Model;
use crate::error::{Error, Result};
use crate::tensorkit::{adamw_step, clip_grad_norm, OptState, Tape};

/// One next-token training step over `batch`; returns the pre-update loss.
pub fn train_lm_step(model: &mut Model, batch: &[Vec<u32>], opt: &mut OptState) -> Result<f32> {
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, model.params(), true);
    let loss = graph::build_lm_loss(&cfg, &mut tape, &p, batch)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became {value}")));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = p
        .iter()
        .map(|&v| tape.grad(v).expect("trainable").to_vec())
        .collect();
    if let Some(max) = opt.config.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    adamw_step(model.params_mut(), &grads, opt)?;
    Ok(value)
}

/// Mean next-token loss without updating anything.
pub fn lm_loss_batch(model: &Model, batch: &[Vec<u32>]) -> Result<f32> {
    let mut tape = Tape::new();
    let p = graph::load_params(&mut tape, model.params(), false);
    let loss = graph::build_lm_loss(model.config(), &mut tape, &p, batch)?;
    tape.value(loss).item()
}
