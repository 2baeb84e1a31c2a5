//! LSTM that emits one learning rate per inner step for the task-specific
//! weights of a composite learner.
//!
//! The cell input at step t is `[flatten(θ₂); L; flatten(∇θ₂ L)]`. Gate
//! pre-activations are `x·Wx + h·Wh + b`, split into input, forget, output
//! and candidate blocks of width H, and the readout is
//! `α = β·σ(h·w + b_out)`.

use super::{check_loss, AdaptResult, LossFn};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 20;
pub const DEFAULT_BETA: f64 = 0.1;
const INIT_RANGE: f64 = 0.1;

/// Meta-parameters of the LSTM learning-rate meta-learner.
#[derive(Clone, Debug, PartialEq)]
pub struct LrLstmState {
    /// `wx [D x 4H]`, `wh [H x 4H]`, `b [4H]`, `w_out [H x 1]`, `b_out [1]`.
    pub phi: ParamSet,
    pub beta: f64,
    /// Shared layers θ₁, never adapted per task.
    pub theta1: ParamSet,
    /// Initial task-specific layers θ₂⁰.
    pub theta2_init: ParamSet,
    pub steps: usize,
    pub hidden: usize,
}

impl LrLstmState {
    pub fn new(
        theta1: ParamSet,
        theta2_init: ParamSet,
        hidden: usize,
        beta: f64,
        steps: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be > 0, got {beta}")));
        }
        if steps == 0 || hidden == 0 {
            return Err(Error::Invalid("LSTM steps and hidden size must be >= 1".into()));
        }
        let input = lstm_input_size(theta2_init.numel());
        let phi = init_lstm(input, hidden, rng)?;
        Ok(LrLstmState {
            phi,
            beta,
            theta1,
            theta2_init,
            steps,
            hidden,
        })
    }
}

/// Width of the cell input for a θ₂ of `n` scalars.
pub fn lstm_input_size(n: usize) -> usize {
    2 * n + 1
}

/// Weights uniform in ±0.1, forget-gate bias 1, other biases 0.
pub fn init_lstm(input: usize, hidden: usize, rng: &mut SeededRng) -> Result<ParamSet> {
    let mut uniform = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-INIT_RANGE, INIT_RANGE)).collect()
    };
    let wx = Tensor::new(vec![input, 4 * hidden], uniform(input * 4 * hidden))?;
    let wh = Tensor::new(vec![hidden, 4 * hidden], uniform(hidden * 4 * hidden))?;
    let w_out = Tensor::new(vec![hidden, 1], uniform(hidden))?;
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].fill(1.0);
    ParamSet::from_entries(vec![
        ("wx".into(), wx),
        ("wh".into(), wh),
        ("b".into(), Tensor::vector(b)),
        ("w_out".into(), w_out),
        ("b_out".into(), Tensor::vector(vec![0.0])),
    ])
}

/// One cell step. `h_prev`/`c_prev` are `[1 x H]`; returns the scalar
/// learning rate and the new hidden and cell states.
#[allow(clippy::too_many_arguments)]
pub fn lstm_lr_step(
    tape: &mut Tape,
    phi: &[Var],
    beta: f64,
    theta2: Var,
    loss: Var,
    grad: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var, Var)> {
    let [wx, wh, b, w_out, b_out] = phi else {
        return Err(Error::Invalid("LSTM parameters must be [wx, wh, b, w_out, b_out]".into()));
    };
    for v in [theta2, loss, grad, h_prev, c_prev] {
        if !tape.value(v)?.is_finite() {
            return Err(Error::NonFinite("LSTM input".into()));
        }
    }
    let hidden = tape.dims(*wh)?[0];
    let loss = tape.reshape(loss, &[1])?;
    let x = tape.concat(&[theta2, loss, grad])?;
    let width = tape.dims(x)?[0];
    let x = tape.reshape(x, &[1, width])?;
    let zx = tape.matmul(x, *wx)?;
    let zh = tape.matmul(h_prev, *wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias_row(z, *b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice(z, k * hidden, &[1, hidden]);
    let i = gate(tape, 0)?;
    let i = tape.sigmoid(i)?;
    let f = gate(tape, 1)?;
    let f = tape.sigmoid(f)?;
    let o = gate(tape, 2)?;
    let o = tape.sigmoid(o)?;
    let g = gate(tape, 3)?;
    let g = tape.tanh(g)?;
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    let r = tape.matmul(h, *w_out)?;
    let r = tape.add_bias_row(r, *b_out)?;
    let s = tape.sigmoid(r)?;
    let alpha = tape.scale(s, beta)?;
    let alpha = tape.reshape(alpha, &[])?;
    Ok((alpha, h, c))
}

/// `steps` inner updates `θ₂ ← θ₂ − α_t ∇θ₂ L` with α_t from the LSTM.
/// `train_loss` receives `θ₁ ++ θ₂`. The returned `adapted` list is the full
/// learner, `θ₁ ++ θ₂ᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_adapt(
    tape: &mut Tape,
    phi: &[Var],
    beta: f64,
    hidden: usize,
    theta1: &[Var],
    theta2_init: &[Var],
    steps: usize,
    train_loss: LossFn<'_>,
    first_order: bool,
) -> Result<AdaptResult> {
    if steps == 0 {
        return Err(Error::Invalid("LSTM meta-learner needs at least one step".into()));
    }
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]))?;
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]))?;
    let mut theta2 = theta2_init.to_vec();
    let mut losses = Vec::with_capacity(steps);
    let mut rates = Vec::with_capacity(steps);
    for step in 0..steps {
        let full: Vec<Var> = theta1.iter().chain(&theta2).copied().collect();
        let loss = train_loss(tape, &full)?;
        losses.push(check_loss(tape, loss, step)?);
        let grads = tape.grad(loss, &theta2, !first_order)?;
        let flat_theta = tape.concat(&theta2)?;
        let flat_grad = tape.concat(&grads)?;
        let (alpha, h_next, c_next) =
            lstm_lr_step(tape, phi, beta, flat_theta, loss, flat_grad, h, c)?;
        h = h_next;
        c = c_next;
        rates.push(tape.value(alpha)?.item().unwrap_or(f64::NAN));
        theta2 = theta2
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| {
                let s = tape.mul_scalar(g, alpha)?;
                tape.sub(p, s)
            })
            .collect::<Result<_>>()?;
    }
    let adapted = theta1.iter().chain(&theta2).copied().collect();
    Ok(AdaptResult {
        adapted,
        train_losses: losses,
        learning_rates: rates,
    })
}
