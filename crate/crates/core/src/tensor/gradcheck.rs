//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over elements of `|analytic − numeric| / (|numeric| + 1e-8)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// As [`finite_diff_check`], differentiating with respect to every input.
pub fn finite_diff_check_multi<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(&f, inputs, k, step)?;
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zeros);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max((a - n).abs() / (n.abs() + 1e-8));
        }
    }
    Ok(worst)
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work[which].data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
