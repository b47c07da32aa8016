//! Central finite-difference verification of tape gradients.
//!
//! The checker is deliberately independent of the backward rules: it only
//! runs forward passes on perturbed copies of the inputs and compares the
//! quotient against what `backward` produced.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaf vars bound in input order.
pub type LossFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks every element of every input. Returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over all entries.
pub fn grad_check(inputs: &[Tensor], f: LossFn, eps: f64) -> Result<f64> {
    let plan: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_plan(inputs, f, eps, &plan)
}

/// Like [`grad_check`] but probes at most `per_input` evenly spaced entries
/// of each input, for models too large to probe exhaustively.
pub fn grad_check_sampled(inputs: &[Tensor], f: LossFn, eps: f64, per_input: usize) -> Result<f64> {
    let plan: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.len();
            let k = per_input.min(n).max(1);
            let mut idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
            idx.dedup();
            idx
        })
        .collect();
    grad_check_plan(inputs, f, eps, &plan)
}

fn grad_check_plan(inputs: &[Tensor], f: LossFn, eps: f64, plan: &[Vec<usize>]) -> Result<f64> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidParam { op: "grad_check", detail: "eps must be positive".to_string() });
    }
    let analytic = analytic_grads(inputs, f)?;
    let mut worst: f64 = 0.0;
    for (which, probes) in plan.iter().enumerate() {
        for &j in probes {
            let numeric = central_difference(inputs, f, which, j, eps)?;
            let a = analytic[which][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn analytic_grads(inputs: &[Tensor], f: LossFn) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

fn central_difference(inputs: &[Tensor], f: LossFn, which: usize, j: usize, eps: f64) -> Result<f64> {
    let lo = eval_perturbed(inputs, f, which, j, -eps)?;
    let hi = eval_perturbed(inputs, f, which, j, eps)?;
    Ok((hi - lo) / (2.0 * eps))
}

fn eval_perturbed(inputs: &[Tensor], f: LossFn, which: usize, j: usize, delta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == which {
                let mut t = t.clone();
                t.data_mut()[j] += delta;
                tape.leaf(&t)
            } else {
                tape.leaf(t)
            }
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.data(loss)[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_rule_and_catches_a_wrong_one() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.2]).unwrap();
        // sum(sigmoid(x)) has a clean analytic gradient.
        let good: LossFn = &|tape, vars| {
            let s = tape.sigmoid(vars[0])?;
            tape.sum(s)
        };
        let err = grad_check(&[x.clone()], good, 1e-5).unwrap();
        assert!(err < 1e-9, "correct rule should check out, err {}", err);

        // A loss whose forward path sneaks in a value the tape cannot see
        // makes analytic and numeric gradients disagree, which is exactly
        // the failure mode the checker exists to detect.
        let bad: LossFn = &|tape, vars| {
            let frozen = tape.constant(&tape.to_tensor(vars[0]));
            let prod = tape.mul(vars[0], frozen)?;
            tape.sum(prod)
        };
        let err = grad_check(&[x], bad, 1e-5).unwrap();
        assert!(err > 1e-2, "detached forward must be flagged, err {}", err);
    }

    #[test]
    fn sampled_variant_probes_a_subset() {
        let x = Tensor::new(vec![10], (0..10).map(|i| 0.1 * i as f64 + 0.05).collect()).unwrap();
        let f: LossFn = &|tape, vars| {
            let s = tape.sigmoid(vars[0])?;
            tape.sum(s)
        };
        let err = grad_check_sampled(&[x], f, 1e-5, 3).unwrap();
        assert!(err < 1e-9);
    }
}
