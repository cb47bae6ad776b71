//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it is used to check.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Central differences of a scalar function at `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error for each input, in input order.
    pub per_input: Vec<f64>,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `build(inputs)` against central differences for
/// every element of every input. `build` must return a single-element tensor.
pub fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == k {
                        t.param(Tensor::new(inp.shape().to_vec(), x.to_vec()).expect("same shape"))
                    } else {
                        t.param(inp.clone())
                    }
                })
                .collect();
            let o = build(&mut t, &vs).expect("forward succeeded once already");
            t.value(o).item()
        };
        let numeric = finite_difference(eval, input.data(), DEFAULT_STEP);
        per_input.push(max_relative_error(&analytic, &numeric, DEFAULT_FLOOR));
    }
    Ok(GradReport { per_input })
}
