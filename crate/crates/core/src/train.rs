//! Outer meta-training loops, the outer optimizers and the evaluation
//! drivers.

use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metalearners::{
    meta_loss, LossKind, LrLstmState, MamlState, MetaSgdState, MetaState, SupervisedLearner,
    DEFAULT_BETA, DEFAULT_HIDDEN,
};
use crate::models::{split_params, MlpSpec, ParamSet};
use crate::rl::{
    mean_total_reward, pg_surrogate_loss, rollouts, sample_nav_task, NavConfig, RlTrainConfig,
    StartMode,
};
use crate::rng::{SeededRng, Stream};
use crate::stats::linspace;
use crate::tasks::{
    accuracy, evaluate_regression, EvalSummary, FewShotTask, RegressionEvalConfig, SineTaskConfig,
};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.dims())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

fn check_grad_dims(params: &ParamSet, grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Invalid(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.tensors().zip(grads) {
        if p.dims() != g.dims() {
            return Err(Error::DimMismatch {
                op: "optimizer step",
                lhs: p.dims().to_vec(),
                rhs: g.dims().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    check_grad_dims(params, grads)?;
    if state.m.len() != grads.len()
        || state.m.iter().zip(grads).any(|(m, g)| m.dims() != g.dims())
    {
        return Err(Error::Invalid("Adam state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
    check_grad_dims(params, grads)?;
    for (p, g) in params.tensors_mut().zip(grads) {
        for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// The outer optimizer together with its running state.
#[derive(Clone, Debug, PartialEq)]
pub enum OuterOptimizer {
    Adam(AdamState),
    Sgd,
}

impl OuterOptimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Adam => OuterOptimizer::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => OuterOptimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            OuterOptimizer::Adam(s) => adam_step(params, grads, s, lr),
            OuterOptimizer::Sgd => sgd_step(params, grads, lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig {
    pub iterations: usize,
    pub meta_batch: usize,
    pub outer_lr: f64,
    pub optimizer: OptimizerKind,
    /// Coefficient of the optional `λ‖meta-params‖²` term.
    pub l2: f64,
    pub seed: u64,
    /// Treat inner gradients as constants in the outer gradient.
    pub first_order: bool,
    pub log_interval: usize,
    /// Fill `wall_ms` in the log; off by default so logs depend only on the
    /// seed.
    pub record_wall_clock: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            iterations: 60_000,
            meta_batch: 4,
            outer_lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            l2: 0.0,
            seed: 0,
            first_order: false,
            log_interval: 1,
            record_wall_clock: false,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch == 0 {
            return Err(Error::Invalid("train.meta_batch must be >= 1".into()));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::Invalid("train.outer_lr must be > 0".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Invalid("train.l2 must be >= 0".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Invalid("train.log_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// 1-based index of the outer iteration just completed.
    pub iteration: usize,
    /// Mean post-adaptation test loss (supervised) or mean post-adaptation
    /// return (navigation) over the iteration's batch.
    pub value: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

/// Meta-state plus outer-optimizer state, enough to continue or persist a
/// run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub state: MetaState,
    pub optimizer: OuterOptimizer,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(state: MetaState, kind: OptimizerKind) -> Self {
        let optimizer = OuterOptimizer::new(kind, &state.trainable());
        Trainer {
            state,
            optimizer,
            iteration: 0,
        }
    }

    fn apply(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = self.state.trainable();
        self.optimizer.step(&mut params, grads, lr)?;
        self.state.set_trainable(&params)
    }
}

fn add_into(acc: &mut Option<Vec<Tensor>>, tape: &Tape, grads: &[Var]) -> Result<()> {
    let values: Vec<Tensor> = grads
        .iter()
        .map(|&g| tape.value(g).cloned())
        .collect::<Result<_>>()?;
    match acc {
        None => *acc = Some(values),
        Some(total) => {
            for (t, v) in total.iter_mut().zip(&values) {
                *t = t.zip_map(v, |a, b| a + b);
            }
        }
    }
    Ok(())
}

/// Adds `λ‖p‖²` to `loss` and `2λp` to the gradients. A no-op when λ = 0.
fn regularize(params: &ParamSet, l2: f64, loss: &mut f64, grads: &mut [Tensor]) {
    if l2 > 0.0 {
        for (p, g) in params.tensors().zip(grads.iter_mut()) {
            *loss += l2 * p.data().iter().map(|v| v * v).sum::<f64>();
            *g = g.zip_map(p, |g, p| g + 2.0 * l2 * p);
        }
    }
}

/// Summed post-adaptation test loss over `tasks` and its gradient with
/// respect to [`MetaState::trainable`]. Also returns the per-task losses.
pub fn supervised_outer_grad(
    state: &MetaState,
    learner: &SupervisedLearner,
    tasks: &[FewShotTask],
    first_order: bool,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    let mut tape = Tape::new();
    let mut acc = None;
    let mut losses = Vec::with_capacity(tasks.len());
    for task in tasks {
        tape.clear();
        let reg = state.register(&mut tape)?;
        let mut train =
            |tape: &mut Tape, p: &[Var]| learner.loss(tape, p, &task.train_x, &task.train_y);
        let res = state.adapt(&mut tape, &reg, &mut train, first_order)?;
        let loss = meta_loss(&mut tape, learner, &res, &task.test_x, &task.test_y)?;
        losses.push(tape.value(loss)?.item().unwrap_or(f64::NAN));
        let grads = tape.grad(loss, &reg.outer, false)?;
        add_into(&mut acc, &tape, &grads)?;
    }
    Ok((losses, acc.expect("at least one task")))
}

fn elapsed_ms(cfg: &MetaTrainConfig, start: &Instant) -> u64 {
    if cfg.record_wall_clock {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// One outer update per iteration on the summed test losses of
/// `meta_batch` freshly sampled tasks. `sample_task` draws from the task
/// stream of `cfg.seed`.
pub fn meta_train_supervised<F>(
    trainer: &mut Trainer,
    learner: &SupervisedLearner,
    mut sample_task: F,
    cfg: &MetaTrainConfig,
) -> Result<TrainLog>
where
    F: FnMut(&mut SeededRng) -> Result<FewShotTask>,
{
    cfg.validate()?;
    let mut rng = SeededRng::stream(cfg.seed, Stream::Tasks);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let tasks: Vec<FewShotTask> = (0..cfg.meta_batch)
            .map(|_| sample_task(&mut rng))
            .collect::<Result<_>>()?;
        let outcome = supervised_outer_grad(&trainer.state, learner, &tasks, cfg.first_order);
        let (losses, mut grads) = match outcome {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: it + 1 }),
            Err(e) => return Err(e),
        };
        let mut total: f64 = losses.iter().sum();
        regularize(&trainer.state.trainable(), cfg.l2, &mut total, &mut grads);
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it + 1 });
        }
        trainer.apply(&grads, cfg.outer_lr)?;
        trainer.iteration += 1;
        if (it + 1) % cfg.log_interval == 0 {
            log.records.push(LogRecord {
                iteration: it + 1,
                value: losses.iter().sum::<f64>() / losses.len() as f64,
                wall_ms: elapsed_ms(cfg, &start),
            });
        }
    }
    Ok(log)
}

/// Per-task pre- and post-adaptation statistics for navigation.
#[derive(Clone, Debug, PartialEq)]
pub struct RlTaskOutcome {
    pub pre_return: f64,
    pub post_return: f64,
}

fn nav_task_episode(
    state: &MetaState,
    spec: &MlpSpec,
    mdp: &crate::rl::NavMdp,
    rl: &RlTrainConfig,
    first_order: bool,
    rng: &mut SeededRng,
    want_grad: bool,
) -> Result<(RlTaskOutcome, Option<(Tape, Vec<Var>)>)> {
    let theta = state.initial_learner()?;
    let pre = rollouts(spec, &theta, mdp, rl.n1, rng)?;
    let mut tape = Tape::new();
    let reg = state.register(&mut tape)?;
    let mut train = |tape: &mut Tape, p: &[Var]| pg_surrogate_loss(tape, spec, p, &pre, mdp.gamma);
    let res = state.adapt(&mut tape, &reg, &mut train, first_order || !want_grad)?;
    let adapted = theta.read_back(&tape, &res.adapted)?;
    let post = rollouts(spec, &adapted, mdp, rl.n2, rng)?;
    let outcome = RlTaskOutcome {
        pre_return: mean_total_reward(&pre),
        post_return: mean_total_reward(&post),
    };
    if !want_grad {
        return Ok((outcome, None));
    }
    let loss = pg_surrogate_loss(&mut tape, spec, &res.adapted, &post, mdp.gamma)?;
    if !tape.value(loss)?.is_finite() {
        return Err(Error::NonFinite("post-adaptation surrogate loss".into()));
    }
    let mut out = vec![loss];
    out.extend(tape.grad(loss, &reg.outer, false)?);
    Ok((outcome, Some((tape, out))))
}

/// Navigation meta-training: N1 rollouts, one differentiable inner step on
/// their surrogate loss, N2 rollouts with the adapted policy, and one outer
/// step on the summed post-adaptation surrogate losses.
pub fn meta_train_rl(
    trainer: &mut Trainer,
    spec: &MlpSpec,
    mode: StartMode,
    nav: &NavConfig,
    rl: &RlTrainConfig,
    cfg: &MetaTrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    nav.validate()?;
    rl.validate()?;
    let mut task_rng = SeededRng::stream(cfg.seed, Stream::Tasks);
    let mut roll_rng = SeededRng::stream(cfg.seed, Stream::Rollouts);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let mut acc: Option<Vec<Tensor>> = None;
        let mut total = 0.0;
        let mut returns = Vec::with_capacity(cfg.meta_batch);
        for _ in 0..cfg.meta_batch {
            let mdp = sample_nav_task(mode, nav, &mut task_rng);
            let episode =
                nav_task_episode(&trainer.state, spec, &mdp, rl, cfg.first_order, &mut roll_rng, true);
            let (outcome, grads) = match episode {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: it + 1 }),
                Err(e) => return Err(e),
            };
            let (tape, vars) = grads.expect("gradients requested");
            total += tape.value(vars[0])?.item().unwrap_or(f64::NAN);
            add_into(&mut acc, &tape, &vars[1..])?;
            returns.push(outcome.post_return);
        }
        let mut grads = acc.expect("meta_batch >= 1");
        regularize(&trainer.state.trainable(), cfg.l2, &mut total, &mut grads);
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it + 1 });
        }
        trainer.apply(&grads, cfg.outer_lr)?;
        trainer.iteration += 1;
        if (it + 1) % cfg.log_interval == 0 {
            log.records.push(LogRecord {
                iteration: it + 1,
                value: returns.iter().sum::<f64>() / returns.len() as f64,
                wall_ms: elapsed_ms(cfg, &start),
            });
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlEvalSummary {
    pub pre: EvalSummary,
    pub post: EvalSummary,
}

impl RlEvalSummary {
    /// Fraction of tasks whose post-adaptation return beats the
    /// pre-adaptation one.
    pub fn improved_fraction(&self) -> f64 {
        let n = self.post.per_item.len();
        let better = self
            .pre
            .per_item
            .iter()
            .zip(&self.post.per_item)
            .filter(|(a, b)| b > a)
            .count();
        better as f64 / n as f64
    }
}

/// Meta-testing on `rl.eval_tasks` fresh tasks: N1 rollouts, adapt, N2
/// fresh rollouts, mean undiscounted return per task.
pub fn evaluate_rl(
    state: &MetaState,
    spec: &MlpSpec,
    mode: StartMode,
    nav: &NavConfig,
    rl: &RlTrainConfig,
    seed: u64,
) -> Result<RlEvalSummary> {
    nav.validate()?;
    rl.validate()?;
    let mut task_rng = SeededRng::stream(seed, Stream::Eval);
    let mut roll_rng = SeededRng::stream(seed, Stream::EvalRollouts);
    let mut pre = Vec::with_capacity(rl.eval_tasks);
    let mut post = Vec::with_capacity(rl.eval_tasks);
    for _ in 0..rl.eval_tasks {
        let mdp = sample_nav_task(mode, nav, &mut task_rng);
        let (o, _) = nav_task_episode(state, spec, &mdp, rl, true, &mut roll_rng, false)?;
        pre.push(o.pre_return);
        post.push(o.post_return);
    }
    Ok(RlEvalSummary {
        pre: EvalSummary::from_items(pre),
        post: EvalSummary::from_items(post),
    })
}

/// Adapt on `(train_x, train_y)` and predict at `x`.
pub fn adapt_and_predict(
    state: &MetaState,
    learner: &SupervisedLearner,
    train_x: &Tensor,
    train_y: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let mut train = |tape: &mut Tape, p: &[Var]| learner.loss(tape, p, train_x, train_y);
    let (adapted, _) = state.adapt_values(&mut train)?;
    learner.predict(&adapted, x)
}

/// Sine meta-testing with `shots` training points per adaptation.
pub fn evaluate_sine(
    state: &MetaState,
    learner: &SupervisedLearner,
    tasks: &SineTaskConfig,
    eval: &RegressionEvalConfig,
    shots: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let cfg = SineTaskConfig {
        shots,
        ..tasks.clone()
    };
    let mut rng = SeededRng::stream(seed, Stream::Eval);
    evaluate_regression(&cfg, eval, &mut rng, |tx, ty, gx| {
        adapt_and_predict(state, learner, tx, ty, gx)
    })
}

/// Mean query accuracy after adaptation over `episodes` sampled tasks.
pub fn evaluate_classification<F>(
    state: &MetaState,
    learner: &SupervisedLearner,
    mut sample_task: F,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary>
where
    F: FnMut(&mut SeededRng) -> Result<FewShotTask>,
{
    let mut rng = SeededRng::stream(seed, Stream::Eval);
    let mut acc = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let task = sample_task(&mut rng)?;
        let logits = adapt_and_predict(state, learner, &task.train_x, &task.train_y, &task.test_x)?;
        acc.push(accuracy(&logits, &task.test_y));
    }
    Ok(EvalSummary::from_items(acc))
}

/// Curve data for one sine task: grid, truth, prediction before and after
/// adaptation on the task's K training points.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationCurve {
    pub x: Vec<f64>,
    pub truth: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
}

pub fn adaptation_curve(
    state: &MetaState,
    learner: &SupervisedLearner,
    tasks: &SineTaskConfig,
    points: usize,
    task_seed: u64,
) -> Result<AdaptationCurve> {
    let mut rng = SeededRng::new(task_seed);
    let task = crate::tasks::sample_sine_task(tasks, &mut rng)?;
    let crate::tasks::TaskDescriptor::Sine(curve) = task.descriptor else {
        return Err(Error::Invalid("expected a sine task".into()));
    };
    let grid = linspace(tasks.input_range.0, tasks.input_range.1, points);
    let (gx, gy) = curve.points(&grid);
    let pre = learner.predict(&state.initial_learner()?, &gx)?;
    let post = adapt_and_predict(state, learner, &task.train_x, &task.train_y, &gx)?;
    Ok(AdaptationCurve {
        x: grid,
        truth: gy.into_data(),
        pre: pre.into_data(),
        post: post.into_data(),
        train_x: task.train_x.into_data(),
        train_y: task.train_y.into_data(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaLearnerKind {
    MetaSgd,
    Maml,
    LrLstm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrLstmConfig {
    pub hidden: usize,
    pub beta: f64,
    pub steps: usize,
    /// Layers before this index are shared (θ₁); the rest are adapted.
    pub split_layer: usize,
}

impl Default for LrLstmConfig {
    fn default() -> Self {
        LrLstmConfig {
            hidden: DEFAULT_HIDDEN,
            beta: DEFAULT_BETA,
            steps: 3,
            split_layer: 2,
        }
    }
}

/// How the meta-state is built from a freshly initialized learner.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaInitConfig {
    pub maml_alpha: f64,
    pub maml_steps: usize,
    /// Fixed initial Meta-SGD rate; `None` draws one shared value.
    pub alpha_init: Option<f64>,
    pub lstm: LrLstmConfig,
}

impl Default for MetaInitConfig {
    fn default() -> Self {
        MetaInitConfig {
            maml_alpha: 0.01,
            maml_steps: 1,
            alpha_init: None,
            lstm: LrLstmConfig::default(),
        }
    }
}

pub fn init_meta_state(
    kind: MetaLearnerKind,
    learner: ParamSet,
    cfg: &MetaInitConfig,
    rng: &mut SeededRng,
) -> Result<MetaState> {
    Ok(match kind {
        MetaLearnerKind::MetaSgd => MetaState::MetaSgd(match cfg.alpha_init {
            Some(a) => MetaSgdState::new(learner.clone(), learner.filled(a))?,
            None => MetaSgdState::init(learner, rng),
        }),
        MetaLearnerKind::Maml => {
            MetaState::Maml(MamlState::new(learner, cfg.maml_alpha, cfg.maml_steps)?)
        }
        MetaLearnerKind::LrLstm => {
            let parts = split_params(&learner, cfg.lstm.split_layer)?;
            MetaState::LrLstm(LrLstmState::new(
                parts.shared,
                parts.task_specific,
                cfg.lstm.hidden,
                cfg.lstm.beta,
                cfg.lstm.steps,
                rng,
            )?)
        }
    })
}

/// Default learner for sine regression.
pub fn sine_learner() -> SupervisedLearner {
    SupervisedLearner::new(MlpSpec::sine_regressor(), LossKind::Mse)
}

#[cfg(test)]
mod tests;
