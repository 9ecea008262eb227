// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay, applied to rank ≥ 2 parameters only.
    pub weight_decay: f32,
    /// Global gradient-norm ceiling applied by training loops before the
    /// update (see [`clip_grad_norm`]); `adamw_step` itself never clips.
    pub grad_clip: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// Rebuilds a state from saved parts.
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension("first/second moments disagree".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One AdamW update with bias correction.
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut OptState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.numel() != state.m[i].len() {
            return Err(Error::Dimension(format!(
                "parameter {i}: {} values, {} grads, {} moments",
                p.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = (1.0 - f64::from(c.beta1).powi(t)) as f32;
    let bc2 = (1.0 - f64::from(c.beta2).powi(t)) as f32;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let decay = if p.rank() >= 2 { c.lr * c.weight_decay } else { 0.0 };
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= decay * *w;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        if !p.is_finite() {
            return Err(Error::Numeric("AdamW produced a non-finite parameter".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Tensor> {
        vec![
            Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2),
            Tensor::from_fn(&[3], |i| 1.0 - i as f32),
        ]
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(cfg, &p);
        let g = vec![vec![0.0; 6], vec![0.0; 3]];
        adamw_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g|+eps) for a fresh state.
        let mut p = vec![Tensor::from_fn(&[4], |i| i as f32)];
        let before = p[0].clone();
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(cfg, &p);
        adamw_step(&mut p, &[vec![1.0; 4]], &mut st).unwrap();
        let want = 0.01f64 * 1.0 / (1.0 + 1e-8);
        for (a, b) in p[0].data().iter().zip(before.data()) {
            assert!(((b - a) as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut p = params();
        let before = p.clone();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(cfg, &p);
        adamw_step(&mut p, &[vec![0.0; 6], vec![0.0; 3]], &mut st).unwrap();
        assert_eq!(p[1], before[1]);
        for (a, b) in p[0].data().iter().zip(before[0].data()) {
            assert!((a - b * 0.95).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = params();
            let mut st = OptState::new(AdamWConfig::default(), &p);
            for k in 0..5 {
                let g = vec![
                    (0..6).map(|i| ((i + k) as f32 * 0.7).sin()).collect(),
                    (0..3).map(|i| ((i * k) as f32 * 0.3).cos()).collect(),
                ];
                adamw_step(&mut p, &g, &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = params();
        let mut st = OptState::new(AdamWConfig::default(), &p);
        let err = adamw_step(&mut p, &[vec![0.0; 5], vec![0.0; 3]], &mut st);
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    }
}
