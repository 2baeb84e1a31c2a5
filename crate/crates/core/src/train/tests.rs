use super::*;
use crate::gradcheck;
use crate::metalearners::meta_sgd_adapt;
use crate::models::{init_mlp, init_policy, Activation};
use crate::rl::{NavMdp, Trajectory};
use crate::tasks::sample_sine_task;

fn scalar_set(v: f64) -> ParamSet {
    ParamSet::from_entries(vec![("x".into(), Tensor::vector(vec![v]))]).unwrap()
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut p = init_mlp(&MlpSpec::sine_regressor(), &mut SeededRng::new(0)).unwrap();
    let before = p.clone();
    let mut s = AdamState::new(&p);
    let zeros: Vec<Tensor> = p.tensors().map(|t| Tensor::zeros(t.dims())).collect();
    adam_step(&mut p, &zeros, &mut s, 1e-3).unwrap();
    assert!(p.bit_eq(&before));
    assert_eq!(s.step, 1);
}

#[test]
fn adam_first_step_and_hand_unroll() {
    let mut p = scalar_set(0.5);
    let mut s = AdamState::new(&p);
    let g = [Tensor::vector(vec![1.0])];
    adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
    let delta = 0.5 - p.get("x").unwrap().data()[0];
    assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);

    // Two steps with g = 0.3, unrolled by hand.
    let lr = 0.01;
    let gv = 0.3;
    let mut p = scalar_set(1.0);
    let mut s = AdamState::new(&p);
    let g = [Tensor::vector(vec![gv])];
    adam_step(&mut p, &g, &mut s, lr).unwrap();
    adam_step(&mut p, &g, &mut s, lr).unwrap();
    let mut x = 1.0;
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=2 {
        m = 0.9 * m + 0.1 * gv;
        v = 0.999 * v + 0.001 * gv * gv;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= lr * mh / (vh.sqrt() + 1e-8);
    }
    assert_eq!(p.get("x").unwrap().data()[0], x);
    assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, lr).is_err());
}

fn tiny_learner() -> SupervisedLearner {
    SupervisedLearner::new(MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap(), LossKind::Mse)
}

fn tiny_state(kind: MetaLearnerKind, seed: u64) -> MetaState {
    let learner = tiny_learner();
    let mut rng = SeededRng::new(seed);
    let mut p = init_mlp(&learner.spec, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let cfg = MetaInitConfig {
        alpha_init: Some(0.2),
        lstm: LrLstmConfig {
            hidden: 3,
            beta: 0.5,
            steps: 2,
            split_layer: 1,
        },
        maml_alpha: 0.2,
        maml_steps: 2,
    };
    init_meta_state(kind, p, &cfg, &mut rng).unwrap()
}

fn tiny_task(seed: u64) -> FewShotTask {
    let cfg = SineTaskConfig {
        amplitude: (0.5, 1.0),
        ..Default::default()
    };
    let mut t = sample_sine_task(&cfg, &mut SeededRng::new(seed)).unwrap();
    // keep tanh units away from saturation
    for x in [&mut t.train_x, &mut t.test_x] {
        *x = x.map(|v| v / 5.0);
    }
    t
}

#[test]
fn zero_iterations_is_identity() {
    for kind in [MetaLearnerKind::MetaSgd, MetaLearnerKind::Maml, MetaLearnerKind::LrLstm] {
        let state = tiny_state(kind, 1);
        let mut trainer = Trainer::new(state.clone(), OptimizerKind::Adam);
        let cfg = MetaTrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let log = meta_train_supervised(&mut trainer, &tiny_learner(), |r| Ok(tiny_task(r.next_u64())), &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(trainer.state, state);
    }
}

/// Outer gradient recovered from one SGD step against central differences
/// of the summed test loss.
#[test]
fn one_iteration_gradient_matches_finite_differences() {
    let learner = tiny_learner();
    let task = tiny_task(3);
    for kind in [MetaLearnerKind::MetaSgd, MetaLearnerKind::Maml, MetaLearnerKind::LrLstm] {
        let state = tiny_state(kind, 2);
        let mut trainer = Trainer::new(state.clone(), OptimizerKind::Sgd);
        let lr = 1e-3;
        let cfg = MetaTrainConfig {
            iterations: 1,
            meta_batch: 1,
            outer_lr: lr,
            optimizer: OptimizerKind::Sgd,
            ..Default::default()
        };
        meta_train_supervised(&mut trainer, &learner, |_| Ok(task.clone()), &cfg).unwrap();
        let before = state.trainable().flatten();
        let after = trainer.state.trainable().flatten();
        let template = state.trainable();
        let loss_at = |flat: &[f64]| -> f64 {
            let mut s = state.clone();
            s.set_trainable(&template.unflatten(flat).unwrap()).unwrap();
            supervised_outer_grad(&s, &learner, std::slice::from_ref(&task), false).unwrap().0[0]
        };
        let h = gradcheck::FD_STEP;
        let mut worst: f64 = 0.0;
        for i in 0..before.len() {
            let mut plus = before.clone();
            plus[i] += h;
            let mut minus = before.clone();
            minus[i] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = (before[i] - after[i]) / lr;
            worst = worst.max(gradcheck::rel_error(analytic, numeric));
        }
        assert!(worst <= 1e-5, "{kind:?}: rel err {worst}");
    }
}

#[test]
fn training_is_seed_deterministic() {
    let run = || {
        let mut trainer = Trainer::new(tiny_state(MetaLearnerKind::MetaSgd, 4), OptimizerKind::Adam);
        let cfg = MetaTrainConfig {
            iterations: 5,
            seed: 7,
            ..Default::default()
        };
        let log = meta_train_supervised(&mut trainer, &tiny_learner(), |r| Ok(tiny_task(r.next_u64())), &cfg).unwrap();
        (trainer, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.state.trainable().bit_eq(&b.state.trainable()));
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(la.records.len(), 5);
    for (x, y) in la.records.iter().zip(&lb.records) {
        assert_eq!(x.iteration, y.iteration);
        assert_eq!(x.value.to_bits(), y.value.to_bits());
        assert_eq!(x.wall_ms, 0);
    }
}

#[test]
fn regularizer_is_exactly_off_at_zero() {
    let p = init_mlp(&MlpSpec::sine_regressor(), &mut SeededRng::new(0)).unwrap();
    let grads: Vec<Tensor> = p.tensors().map(|t| t.map(|v| v * 3.0 + 1.0)).collect();
    let mut g0 = grads.clone();
    let mut loss = 1.25;
    regularize(&p, 0.0, &mut loss, &mut g0);
    assert_eq!(loss, 1.25);
    assert_eq!(g0, grads);

    let mut g1 = grads.clone();
    regularize(&p, 0.5, &mut loss, &mut g1);
    let sq: f64 = p.flatten().iter().map(|v| v * v).sum();
    assert!((loss - 1.25 - 0.5 * sq).abs() < 1e-12);
    for ((a, b), t) in g1.iter().zip(&grads).zip(p.tensors()) {
        for ((a, b), p) in a.data().iter().zip(b.data()).zip(t.data()) {
            assert!((a - b - p).abs() < 1e-15);
        }
    }
}

#[test]
fn maml_and_frozen_meta_sgd_train_identically() {
    let learner = tiny_learner();
    let base = tiny_state(MetaLearnerKind::Maml, 5);
    let MetaState::Maml(m) = &base else { unreachable!() };
    let maml = MetaState::Maml(MamlState::new(m.theta.clone(), 0.01, 1).unwrap());
    let msgd = MetaState::MetaSgd(MetaSgdState::with_frozen_alpha(m.theta.clone(), 0.01));
    let cfg = MetaTrainConfig {
        iterations: 10,
        seed: 3,
        ..Default::default()
    };
    let mut a = Trainer::new(maml, OptimizerKind::Adam);
    let mut b = Trainer::new(msgd, OptimizerKind::Adam);
    let la = meta_train_supervised(&mut a, &learner, |r| Ok(tiny_task(r.next_u64())), &cfg).unwrap();
    let lb = meta_train_supervised(&mut b, &learner, |r| Ok(tiny_task(r.next_u64())), &cfg).unwrap();
    assert!(a.state.trainable().bit_eq(&b.state.trainable()));
    assert_eq!(la, lb);
}

#[test]
fn sine_meta_sgd_training_reduces_loss() {
    let learner = sine_learner();
    let theta = init_mlp(&learner.spec, &mut SeededRng::stream(0, Stream::Init)).unwrap();
    let state = init_meta_state(MetaLearnerKind::MetaSgd, theta, &Default::default(), &mut SeededRng::new(0)).unwrap();
    let eval = RegressionEvalConfig {
        curves: 20,
        test_points: 50,
        repeats: 5,
    };
    let tasks = SineTaskConfig::default();
    let before = evaluate_sine(&state, &learner, &tasks, &eval, 5, 1).unwrap().mean;
    let mut trainer = Trainer::new(state, OptimizerKind::Adam);
    let cfg = MetaTrainConfig {
        iterations: 300,
        log_interval: 100,
        ..Default::default()
    };
    let log = meta_train_supervised(&mut trainer, &learner, |r| sample_sine_task(&tasks, r), &cfg).unwrap();
    assert_eq!(log.records.iter().map(|r| r.iteration).collect::<Vec<_>>(), [100, 200, 300]);
    let after = evaluate_sine(&trainer.state, &learner, &tasks, &eval, 5, 1).unwrap().mean;
    assert!(after < before, "{after} !< {before}");
}

fn tiny_policy(seed: u64) -> (MlpSpec, ParamSet) {
    let spec = MlpSpec::new(vec![2, 4, 2], Activation::Tanh).unwrap();
    let mut rng = SeededRng::new(seed);
    let mut p = init_policy(&spec, &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
    (spec, p)
}

fn nav_mdp(goal: [f64; 2]) -> NavMdp {
    NavMdp {
        start: [0.0, 0.0],
        goal,
        horizon: 5,
        goal_threshold: 0.01,
        gamma: 0.99,
    }
}

#[test]
fn rl_zero_iterations_and_zero_alpha() {
    let (spec, p) = tiny_policy(1);
    let state = MetaState::MetaSgd(MetaSgdState::new(p.clone(), p.filled(0.0)).unwrap());
    let mut trainer = Trainer::new(state.clone(), OptimizerKind::Adam);
    let cfg = MetaTrainConfig {
        iterations: 0,
        ..Default::default()
    };
    meta_train_rl(&mut trainer, &spec, StartMode::Fixed, &NavConfig::default(), &RlTrainConfig::default(), &cfg).unwrap();
    assert_eq!(trainer.state, state);

    // α ≡ 0: the adapted policy is the initial one, so the same noise gives
    // the same trajectories.
    let mdp = nav_mdp([0.3, -0.2]);
    let rl = RlTrainConfig {
        n1: 3,
        n2: 3,
        ..Default::default()
    };
    let theta = state.initial_learner().unwrap();
    let pre = rollouts(&spec, &theta, &mdp, 3, &mut SeededRng::new(4)).unwrap();
    let mut tape = Tape::new();
    let reg = state.register(&mut tape).unwrap();
    let mut train = |tape: &mut Tape, v: &[Var]| pg_surrogate_loss(tape, &spec, v, &pre, 0.99);
    let res = state.adapt(&mut tape, &reg, &mut train, false).unwrap();
    let adapted = theta.read_back(&tape, &res.adapted).unwrap();
    assert!(adapted.bit_eq(&theta));
    let post = rollouts(&spec, &adapted, &mdp, 3, &mut SeededRng::new(4)).unwrap();
    assert_eq!(pre, post);
    let (o, _) = nav_task_episode(&state, &spec, &mdp, &rl, false, &mut SeededRng::new(2), false).unwrap();
    assert!(o.pre_return.is_finite() && o.post_return.is_finite());
}

#[test]
fn rl_outer_gradient_matches_finite_differences_on_frozen_trajectories() {
    let (spec, p) = tiny_policy(2);
    let mdp = nav_mdp([0.4, 0.1]);
    let mut rng = SeededRng::new(6);
    let pre: Vec<Trajectory> = rollouts(&spec, &p, &mdp, 2, &mut rng).unwrap();
    let post: Vec<Trajectory> = rollouts(&spec, &p, &mdp, 2, &mut rng).unwrap();
    let n = p.len();
    let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let (theta, alpha) = v.split_at(n);
        let mut train = |tape: &mut Tape, q: &[Var]| pg_surrogate_loss(tape, &spec, q, &pre, 0.99);
        let res = meta_sgd_adapt(tape, theta, alpha, &mut train, false)?;
        pg_surrogate_loss(tape, &spec, &res.adapted, &post, 0.99)
    };
    let alpha = p.filled(0.05);
    let inputs: Vec<Tensor> = p.tensors().chain(alpha.tensors()).cloned().collect();
    let err = gradcheck::check(&f, &inputs).unwrap();
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn oracle_step_return_bound() {
    // Mean output pinned to goal - start with negligible variance.
    let spec = MlpSpec::nav_policy();
    let mut p = init_policy(&spec, &mut SeededRng::new(0)).unwrap();
    let mdp = nav_mdp([0.3, -0.4]);
    let names: Vec<String> = p.names().map(String::from).collect();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        match name.as_str() {
            "b2" => t.data_mut().copy_from_slice(&mdp.goal),
            "log_var" => t.data_mut().fill((1e-12f64).ln()),
            _ => t.data_mut().fill(0.0),
        }
    }
    let state = MetaState::MetaSgd(MetaSgdState::new(p.clone(), p.filled(0.0)).unwrap());
    let rl = RlTrainConfig::default();
    let (o, _) = nav_task_episode(&state, &spec, &mdp, &rl, true, &mut SeededRng::new(1), false).unwrap();
    assert!(o.post_return >= -mdp.distance(mdp.start));
}

#[test]
fn untrained_policy_wanders() {
    let spec = MlpSpec::nav_policy();
    let p = init_policy(&spec, &mut SeededRng::new(0)).unwrap();
    let state = MetaState::MetaSgd(MetaSgdState::new(p.clone(), p.filled(0.0)).unwrap());
    let rl = RlTrainConfig {
        eval_tasks: 20,
        ..Default::default()
    };
    let s = evaluate_rl(&state, &spec, StartMode::Fixed, &NavConfig::default(), &rl, 0).unwrap();
    assert!(s.pre.mean < -20.0, "{}", s.pre.mean);
    assert_eq!(s.pre.per_item.len(), 20);
}

#[test]
fn ci_over_six_hundred_values() {
    let values: Vec<f64> = (0..600).map(|i| -((i % 37) as f64) * 0.25 - 3.0).collect();
    let s = EvalSummary::from_items(values.clone());
    let n = 600.0;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((s.mean - m).abs() < 1e-12);
    assert!((s.ci95_half - 1.96 * (var / n).sqrt()).abs() < 1e-12);
}

#[test]
fn adaptation_curve_shapes() {
    let learner = sine_learner();
    let theta = init_mlp(&learner.spec, &mut SeededRng::new(0)).unwrap();
    let state = MetaState::MetaSgd(MetaSgdState::init(theta, &mut SeededRng::new(1)));
    let c = adaptation_curve(&state, &learner, &SineTaskConfig::default(), 100, 9).unwrap();
    assert_eq!((c.x.len(), c.truth.len(), c.pre.len(), c.post.len()), (100, 100, 100, 100));
    assert_eq!(c.train_x.len(), 5);
    let again = adaptation_curve(&state, &learner, &SineTaskConfig::default(), 100, 9).unwrap();
    assert_eq!(c, again);
}
