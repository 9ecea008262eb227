// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors with reverse-mode differentiation.
//!
//! [`Tape`] records every differentiable op executed on it; [`Tape::backward`]
//! replays the record in reverse and fills gradients for every leaf created
//! with `requires_grad`. The element type is generic ([`Element`]) so the same
//! graph code runs in `f32` for training and in `f64` for finite-difference
//! oracles ([`grad_check`]).

mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, numeric_gradients, GradCheckReport, Stencil,
};
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptState};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
