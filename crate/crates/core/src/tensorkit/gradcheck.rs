// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic-vs-numeric gradient comparison in 64-bit precision.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
///
/// The per-coordinate relative error is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps coordinates whose true gradient is ~0 from reporting
/// cancellation noise as relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords: usize,
    pub within_tol: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn fraction_within(&self) -> f64 {
        if self.coords == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.coords as f64
        }
    }
}

/// Denominator floor for relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Gradients of `f` with respect to every input, by reverse mode.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("tracked input").to_vec())
        .collect())
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Central-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h⁴).
    #[default]
    FivePoint,
}

/// Central-difference gradient for every input coordinate.
pub fn numeric_gradients<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    h: f64,
    stencil: Stencil,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..work.len() {
        let mut g = Vec::with_capacity(work[t].numel());
        for c in 0..work[t].numel() {
            let orig = work[t].data()[c];
            let mut at = |offset: f64| -> Result<f64> {
                work[t].data_mut()[c] = orig + offset;
                let v = eval(f, &work);
                work[t].data_mut()[c] = orig;
                v
            };
            let d = match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
                }
            };
            g.push(d);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
        within_tol: 0,
        tol,
    };
    for (t, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (c, (&a, &n)) in a.iter().zip(n).enumerate() {
            let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
            let rel = (a - n).abs() / denom;
            report.coords += 1;
            if rel < tol {
                report.within_tol += 1;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((t, c));
            }
        }
    }
    report
}

/// Checks reverse-mode gradients of the scalar-valued `f` against five-point
/// central differences with step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h, Stencil::FivePoint)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}
