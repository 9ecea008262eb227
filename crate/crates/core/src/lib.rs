// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale meta-model interpretability lab.

pub mod behaviors;
pub mod error;
pub mod introspect;
pub mod labbench;
pub mod rng;
pub mod nanoformer;
pub mod tensorkit;

pub use error::{Error, Result};
