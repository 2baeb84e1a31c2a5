//! Optimizer-style meta-learners. Each one turns a task's training loss into
//! adapted learner parameters on a tape, so the post-adaptation test loss can
//! be differentiated back to the meta-parameters.

mod lstm;
mod maml;
mod metasgd;


pub use lstm::{
    init_lstm, lstm_adapt, lstm_input_size, lstm_lr_step, LrLstmState, DEFAULT_BETA,
    DEFAULT_HIDDEN,
};
pub use maml::{maml_adapt, MamlState};
pub use metasgd::{meta_sgd_adapt, meta_sgd_step, MetaSgdState, ALPHA_INIT_RANGE};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{forward_mlp, forward_mlp_values, MlpSpec, ParamSet};
use crate::tensor::Tensor;

/// Training loss of the learner as a function of its parameter vars.
pub type LossFn<'a> = &'a mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>;

#[derive(Clone, Debug)]
pub struct AdaptResult {
    /// Full learner parameters after adaptation, in learner order.
    pub adapted: Vec<Var>,
    /// Training loss before each inner step.
    pub train_losses: Vec<f64>,
    /// Rates emitted by the LSTM, one per step. Empty for the other learners.
    pub learning_rates: Vec<f64>,
}

pub(crate) fn check_loss(tape: &Tape, loss: Var, step: usize) -> Result<f64> {
    let v = tape.value(loss)?.item().ok_or_else(|| Error::NotScalar(tape.dims(loss).unwrap_or(&[]).to_vec()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("training loss at inner step {step}")));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// An MLP paired with its supervised loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLearner {
    pub spec: MlpSpec,
    pub loss: LossKind,
}

impl SupervisedLearner {
    pub fn new(spec: MlpSpec, loss: LossKind) -> Self {
        SupervisedLearner { spec, loss }
    }

    /// Mean loss over the rows of `x`.
    pub fn loss(&self, tape: &mut Tape, params: &[Var], x: &Tensor, y: &Tensor) -> Result<Var> {
        if x.dims().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Empty("example set"));
        }
        let xv = tape.constant(x.clone())?;
        let out = forward_mlp(tape, &self.spec, params, xv)?;
        match self.loss {
            LossKind::Mse => tape.mse_loss(out, y),
            LossKind::CrossEntropy => tape.softmax_cross_entropy(out, y),
        }
    }

    pub fn predict(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        forward_mlp_values(&self.spec, params, x)
    }
}

/// Mean test loss of the adapted learner, on the adaptation tape.
pub fn meta_loss(
    tape: &mut Tape,
    learner: &SupervisedLearner,
    adapted: &AdaptResult,
    test_x: &Tensor,
    test_y: &Tensor,
) -> Result<Var> {
    if test_x.dims().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("test set"));
    }
    learner.loss(tape, &adapted.adapted, test_x, test_y)
}

/// Any of the three meta-learners.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaState {
    MetaSgd(MetaSgdState),
    Maml(MamlState),
    LrLstm(LrLstmState),
}

/// Meta-parameters placed on a tape. `outer` lists the vars the outer loop
/// updates, in the order of [`MetaState::trainable`].
#[derive(Clone, Debug)]
pub struct Registered {
    pub outer: Vec<Var>,
    learner: Vec<Var>,
    alpha: Vec<Var>,
    phi: Vec<Var>,
    split: usize,
}

fn prefixed(prefix: &str, p: &ParamSet, out: &mut ParamSet) {
    for (name, t) in p.entries() {
        out.push(format!("{prefix}.{name}"), t.clone())
            .expect("prefixed names are unique");
    }
}

fn take<'a>(flat: &mut impl Iterator<Item = &'a Tensor>, like: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in like.entries() {
        let v = flat
            .next()
            .ok_or_else(|| Error::Invalid("too few meta-parameter tensors".into()))?;
        if v.dims() != t.dims() {
            return Err(Error::DimMismatch {
                op: "set_trainable",
                lhs: v.dims().to_vec(),
                rhs: t.dims().to_vec(),
            });
        }
        out.push(name.clone(), v.clone())?;
    }
    Ok(out)
}

impl MetaState {
    /// Learner parameters before any adaptation.
    pub fn initial_learner(&self) -> Result<ParamSet> {
        match self {
            MetaState::MetaSgd(s) => Ok(s.theta.clone()),
            MetaState::Maml(s) => Ok(s.theta.clone()),
            MetaState::LrLstm(s) => s.theta1.concat(&s.theta2_init),
        }
    }

    /// Everything the outer loop updates, with `theta.`, `alpha.`, `phi.`,
    /// `theta1.` and `theta2.` name prefixes.
    pub fn trainable(&self) -> ParamSet {
        let mut out = ParamSet::new();
        match self {
            MetaState::MetaSgd(s) => {
                prefixed("theta", &s.theta, &mut out);
                if s.learn_alpha {
                    prefixed("alpha", &s.alpha, &mut out);
                }
            }
            MetaState::Maml(s) => prefixed("theta", &s.theta, &mut out),
            MetaState::LrLstm(s) => {
                prefixed("phi", &s.phi, &mut out);
                prefixed("theta1", &s.theta1, &mut out);
                prefixed("theta2", &s.theta2_init, &mut out);
            }
        }
        out
    }

    /// Every array needed to rebuild the state, frozen ones included.
    pub fn arrays(&self) -> ParamSet {
        match self {
            MetaState::MetaSgd(s) if !s.learn_alpha => {
                let mut out = self.trainable();
                prefixed("alpha", &s.alpha, &mut out);
                out
            }
            _ => self.trainable(),
        }
    }

    /// Inverse of [`MetaState::trainable`]; names and dims must line up.
    pub fn set_trainable(&mut self, values: &ParamSet) -> Result<()> {
        if values.len() != self.trainable().len() {
            return Err(Error::Invalid(format!(
                "expected {} meta-parameter tensors, got {}",
                self.trainable().len(),
                values.len()
            )));
        }
        let mut it = values.tensors();
        match self {
            MetaState::MetaSgd(s) => {
                s.theta = take(&mut it, &s.theta)?;
                if s.learn_alpha {
                    s.alpha = take(&mut it, &s.alpha)?;
                }
            }
            MetaState::Maml(s) => s.theta = take(&mut it, &s.theta)?,
            MetaState::LrLstm(s) => {
                s.phi = take(&mut it, &s.phi)?;
                s.theta1 = take(&mut it, &s.theta1)?;
                s.theta2_init = take(&mut it, &s.theta2_init)?;
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> Result<Registered> {
        match self {
            MetaState::MetaSgd(s) => {
                let theta = s.theta.register(tape, true)?;
                let alpha = s.alpha.register(tape, s.learn_alpha)?;
                let mut outer = theta.clone();
                if s.learn_alpha {
                    outer.extend(&alpha);
                }
                Ok(Registered {
                    outer,
                    learner: theta,
                    alpha,
                    phi: Vec::new(),
                    split: 0,
                })
            }
            MetaState::Maml(s) => {
                let theta = s.theta.register(tape, true)?;
                Ok(Registered {
                    outer: theta.clone(),
                    learner: theta,
                    alpha: Vec::new(),
                    phi: Vec::new(),
                    split: 0,
                })
            }
            MetaState::LrLstm(s) => {
                let phi = s.phi.register(tape, true)?;
                let theta1 = s.theta1.register(tape, true)?;
                let theta2 = s.theta2_init.register(tape, true)?;
                let mut outer = phi.clone();
                outer.extend(&theta1);
                outer.extend(&theta2);
                let mut learner = theta1;
                learner.extend(&theta2);
                Ok(Registered {
                    outer,
                    learner,
                    alpha: Vec::new(),
                    phi,
                    split: s.theta1.len(),
                })
            }
        }
    }

    /// Adapt to one task. `first_order` drops the second-order terms by not
    /// keeping the inner gradient on the graph.
    pub fn adapt(
        &self,
        tape: &mut Tape,
        reg: &Registered,
        train_loss: LossFn<'_>,
        first_order: bool,
    ) -> Result<AdaptResult> {
        match self {
            MetaState::MetaSgd(_) => {
                meta_sgd_adapt(tape, &reg.learner, &reg.alpha, train_loss, first_order)
            }
            MetaState::Maml(s) => {
                maml_adapt(tape, &reg.learner, s.alpha, s.inner_steps, train_loss, first_order)
            }
            MetaState::LrLstm(s) => lstm_adapt(
                tape,
                &reg.phi,
                s.beta,
                s.hidden,
                &reg.learner[..reg.split],
                &reg.learner[reg.split..],
                s.steps,
                train_loss,
                first_order,
            ),
        }
    }

    /// Adapted learner values, computed on a scratch tape without keeping
    /// second-order structure.
    pub fn adapt_values(&self, train_loss: LossFn<'_>) -> Result<(ParamSet, AdaptResult)> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape)?;
        let res = self.adapt(&mut tape, &reg, train_loss, true)?;
        let learner = self.initial_learner()?;
        let values = learner.read_back(&tape, &res.adapted)?;
        Ok((values, res))
    }
}
