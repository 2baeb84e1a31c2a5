//! Central finite differences against tape gradients.
//!
//! The numeric side only ever evaluates forward values, on a fresh tape per
//! perturbation, so it stays independent of the backward sweep it checks.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step used by every check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`. The floor keeps near-zero entries from
/// turning round-off into a large ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| rel_error(a, n)))
        .fold(0.0, f64::max)
}

/// Evaluates `f` on `inputs` registered as leaves of a fresh tape and
/// returns the scalar output.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.var(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)?.item().unwrap_or(f64::NAN))
}

/// Central-difference gradient of `f` at `inputs`.
pub fn numeric_grad<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut point = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].dims());
        for j in 0..inputs[i].len() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + h;
            let plus = eval_scalar(f, &point)?;
            point[i].data_mut()[j] = orig - h;
            let minus = eval_scalar(f, &point)?;
            point[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Tape gradient of `f` at `inputs`.
pub fn analytic_grad<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.var(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.grad(out, &vars, false)?;
    grads.iter().map(|&g| Ok(tape.value(g)?.clone())).collect()
}

/// Largest relative error between tape and finite-difference gradients.
pub fn check<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_grad(f, inputs)?;
    let n = numeric_grad(f, inputs, FD_STEP)?;
    Ok(max_rel_error(&a, &n))
}
