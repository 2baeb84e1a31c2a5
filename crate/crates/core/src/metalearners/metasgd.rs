use super::{check_loss, AdaptResult, LossFn};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::rng::SeededRng;

/// Range the shared initial learning rate is drawn from.
pub const ALPHA_INIT_RANGE: (f64, f64) = (0.005, 0.1);

/// Initialization `theta` and elementwise learning rates `alpha` of the
/// one-step learner `θ' = θ − α∘∇L(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaSgdState {
    pub theta: ParamSet,
    pub alpha: ParamSet,
    /// When false, `alpha` is held fixed by the outer loop.
    pub learn_alpha: bool,
}

impl MetaSgdState {
    pub fn new(theta: ParamSet, alpha: ParamSet) -> Result<Self> {
        if !theta.same_shape(&alpha) {
            return Err(Error::Invalid("alpha must mirror theta's names and dims".into()));
        }
        Ok(MetaSgdState {
            theta,
            alpha,
            learn_alpha: true,
        })
    }

    /// Every entry of `alpha` gets the same value, drawn uniformly from
    /// [`ALPHA_INIT_RANGE`].
    pub fn init(theta: ParamSet, rng: &mut SeededRng) -> Self {
        let a = rng.uniform(ALPHA_INIT_RANGE.0, ALPHA_INIT_RANGE.1);
        let alpha = theta.filled(a);
        MetaSgdState {
            theta,
            alpha,
            learn_alpha: true,
        }
    }

    /// `alpha ≡ value`, excluded from the outer update.
    pub fn with_frozen_alpha(theta: ParamSet, value: f64) -> Self {
        let alpha = theta.filled(value);
        MetaSgdState {
            theta,
            alpha,
            learn_alpha: false,
        }
    }
}

/// `θ − α∘g`, tensor by tensor.
pub fn meta_sgd_step(tape: &mut Tape, theta: &[Var], alpha: &[Var], grads: &[Var]) -> Result<Vec<Var>> {
    if theta.len() != alpha.len() || theta.len() != grads.len() {
        return Err(Error::Invalid("theta, alpha and gradient lists differ in length".into()));
    }
    theta
        .iter()
        .zip(alpha)
        .zip(grads)
        .map(|((&t, &a), &g)| {
            let step = tape.mul(a, g)?;
            tape.sub(t, step)
        })
        .collect()
}

/// One Meta-SGD adaptation step on the training loss.
///
/// Unless `first_order` is set the gradient stays on the graph, so an outer
/// gradient through the result includes the Hessian terms.
pub fn meta_sgd_adapt(
    tape: &mut Tape,
    theta: &[Var],
    alpha: &[Var],
    train_loss: LossFn<'_>,
    first_order: bool,
) -> Result<AdaptResult> {
    let loss = train_loss(tape, theta)?;
    let value = check_loss(tape, loss, 0)?;
    let grads = tape.grad(loss, theta, !first_order)?;
    let adapted = meta_sgd_step(tape, theta, alpha, &grads)?;
    Ok(AdaptResult {
        adapted,
        train_losses: vec![value],
        learning_rates: Vec::new(),
    })
}
