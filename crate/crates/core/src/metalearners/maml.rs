use super::{check_loss, AdaptResult, LossFn};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::ParamSet;

/// Learned initialization with plain gradient steps at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MamlState {
    pub theta: ParamSet,
    pub alpha: f64,
    pub inner_steps: usize,
}

impl MamlState {
    pub fn new(theta: ParamSet, alpha: f64, inner_steps: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!("MAML learning rate must be > 0, got {alpha}")));
        }
        Ok(MamlState {
            theta,
            alpha,
            inner_steps,
        })
    }
}

/// `inner_steps` repetitions of `θ ← θ − α∇L(θ)`.
pub fn maml_adapt(
    tape: &mut Tape,
    theta: &[Var],
    alpha: f64,
    inner_steps: usize,
    train_loss: LossFn<'_>,
    first_order: bool,
) -> Result<AdaptResult> {
    let mut params = theta.to_vec();
    let mut losses = Vec::with_capacity(inner_steps);
    for step in 0..inner_steps {
        let loss = train_loss(tape, &params)?;
        losses.push(check_loss(tape, loss, step)?);
        let grads = tape.grad(loss, &params, !first_order)?;
        params = params
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| {
                let s = tape.scale(g, alpha)?;
                tape.sub(p, s)
            })
            .collect::<Result<_>>()?;
    }
    Ok(AdaptResult {
        adapted: params,
        train_losses: losses,
        learning_rates: Vec::new(),
    })
}
