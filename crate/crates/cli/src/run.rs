//! Experiment orchestration: train, evaluate, export curves.

use std::path::{Path, PathBuf};

use metasgd::metalearners::{LossKind, MetaState, SupervisedLearner};
use metasgd::models::{init_mlp, init_policy};
use metasgd::tasks::{sample_cluster_task, sample_sine_task, EvalSummary};
use metasgd::train::{
    adaptation_curve, evaluate_classification, evaluate_rl, evaluate_sine, init_meta_state,
    meta_train_rl, meta_train_supervised, MetaLearnerKind, TrainLog, Trainer,
};
use metasgd::{SeededRng, Stream};

use crate::checkpoint::{from_trainer, load_checkpoint, save_checkpoint, to_trainer, RunMeta};
use crate::config::{Experiment, RunConfig};
use crate::error::CliError;
use crate::output::{curve_csv, eval_csv, train_log_csv, write_file, EvalRow};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_SUMMARY: &str = "eval.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CURVE_POINTS: usize = 100;

/// Where a training run put its files, plus what it computed.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: TrainLog,
    pub eval: Vec<EvalRow>,
    pub train_log_path: PathBuf,
    pub eval_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn learner_for(cfg: &RunConfig) -> Result<SupervisedLearner, CliError> {
    let loss = match cfg.experiment {
        Experiment::Cluster => LossKind::CrossEntropy,
        _ => LossKind::Mse,
    };
    Ok(SupervisedLearner::new(cfg.learner_spec()?, loss))
}

/// Fresh meta-state drawn from the init stream of `cfg.seed`.
pub fn init_trainer(cfg: &RunConfig) -> Result<Trainer, CliError> {
    let spec = cfg.learner_spec()?;
    let mut rng = SeededRng::stream(cfg.seed, Stream::Init);
    let theta = match cfg.experiment.start_mode() {
        Some(_) => init_policy(&spec, &mut rng)?,
        None => init_mlp(&spec, &mut rng)?,
    };
    let mut state = init_meta_state(cfg.meta_learner, theta, &cfg.init, &mut rng)?;
    if let MetaState::MetaSgd(s) = &mut state {
        s.learn_alpha = cfg.learn_alpha;
    }
    Ok(Trainer::new(state, cfg.train.optimizer))
}

pub fn run_meta(cfg: &RunConfig) -> Result<RunMeta, CliError> {
    Ok(RunMeta {
        spec: cfg.learner_spec()?,
        sine: cfg.sine.clone(),
        config_sha256: cfg.digest(),
    })
}

/// Meta-trains from scratch per `cfg`. Nothing is written.
pub fn train(cfg: &RunConfig) -> Result<(Trainer, TrainLog), CliError> {
    let mut trainer = init_trainer(cfg)?;
    let log = match cfg.experiment {
        Experiment::Sine => {
            let learner = learner_for(cfg)?;
            meta_train_supervised(&mut trainer, &learner, |r| sample_sine_task(&cfg.sine, r), &cfg.train)?
        }
        Experiment::Cluster => {
            let learner = learner_for(cfg)?;
            meta_train_supervised(&mut trainer, &learner, |r| sample_cluster_task(&cfg.cluster, r), &cfg.train)?
        }
        Experiment::NavFixed | Experiment::NavRandom => {
            let mode = cfg.experiment.start_mode().expect("navigation experiment");
            meta_train_rl(&mut trainer, &cfg.learner_spec()?, mode, &cfg.nav, &cfg.rl, &cfg.train)?
        }
    };
    Ok((trainer, log))
}

fn row(setting: impl Into<String>, s: &EvalSummary) -> EvalRow {
    EvalRow {
        setting: setting.into(),
        mean: s.mean,
        ci95_half: s.ci95_half,
    }
}

/// Meta-test summary rows for the experiment, seeded from the eval streams
/// of `cfg.seed`.
pub fn evaluate(cfg: &RunConfig, state: &MetaState) -> Result<Vec<EvalRow>, CliError> {
    let seed = cfg.seed;
    Ok(match cfg.experiment {
        Experiment::Sine => {
            let learner = learner_for(cfg)?;
            cfg.eval_shots
                .iter()
                .map(|&k| {
                    let s = evaluate_sine(state, &learner, &cfg.sine, &cfg.eval, k, seed)?;
                    Ok(row(format!("{k}-shot"), &s))
                })
                .collect::<Result<_, CliError>>()?
        }
        Experiment::Cluster => {
            let learner = learner_for(cfg)?;
            let s = evaluate_classification(
                state,
                &learner,
                |r| sample_cluster_task(&cfg.cluster, r),
                cfg.eval_episodes,
                seed,
            )?;
            vec![row(format!("{}-way {}-shot accuracy", cfg.cluster.ways, cfg.cluster.shots), &s)]
        }
        Experiment::NavFixed | Experiment::NavRandom => {
            let mode = cfg.experiment.start_mode().expect("navigation experiment");
            let s = evaluate_rl(state, &cfg.learner_spec()?, mode, &cfg.nav, &cfg.rl, seed)?;
            let improved: Vec<f64> = s
                .pre
                .per_item
                .iter()
                .zip(&s.post.per_item)
                .map(|(a, b)| if b > a { 1.0 } else { 0.0 })
                .collect();
            vec![
                row("pre_adaptation", &s.pre),
                row("post_adaptation", &s.post),
                row("improved_fraction", &EvalSummary::from_items(improved)),
            ]
        }
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

/// Trains, evaluates and writes the log, eval summary and checkpoint into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    ensure_dir(&cfg.output_dir)?;
    let (trainer, log) = train(cfg)?;
    let train_log_path = cfg.output_dir.join(TRAIN_LOG);
    write_file(&train_log_path, &train_log_csv(&log)?)?;
    let checkpoint_path = cfg.output_dir.join(CHECKPOINT);
    save_checkpoint(&checkpoint_path, &from_trainer(&trainer, &run_meta(cfg)?)?)?;
    let eval = evaluate(cfg, &trainer.state)?;
    let eval_path = cfg.output_dir.join(EVAL_SUMMARY);
    write_file(&eval_path, &eval_csv(&eval)?)?;
    Ok(TrainOutcome {
        trainer,
        log,
        eval,
        train_log_path,
        eval_path,
        checkpoint_path,
    })
}

/// Evaluates a saved checkpoint under `cfg` and writes the eval summary.
/// Returns the rows and whether the checkpoint came from this exact config.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(Vec<EvalRow>, bool), CliError> {
    let (trainer, meta) = to_trainer(&load_checkpoint(checkpoint)?)?;
    if meta.spec != cfg.learner_spec()? {
        return Err(CliError::Validation(format!(
            "checkpoint network {:?} does not match config network {:?}",
            meta.spec.layer_sizes,
            cfg.learner_spec()?.layer_sizes
        )));
    }
    let kind = match trainer.state {
        MetaState::MetaSgd(_) => MetaLearnerKind::MetaSgd,
        MetaState::Maml(_) => MetaLearnerKind::Maml,
        MetaState::LrLstm(_) => MetaLearnerKind::LrLstm,
    };
    if kind != cfg.meta_learner {
        return Err(CliError::Validation(format!(
            "checkpoint holds a {kind:?} meta-learner but the config asks for {:?}",
            cfg.meta_learner
        )));
    }
    ensure_dir(&cfg.output_dir)?;
    let rows = evaluate(cfg, &trainer.state)?;
    write_file(&cfg.output_dir.join(EVAL_SUMMARY), &eval_csv(&rows)?)?;
    Ok((rows, meta.config_sha256 == cfg.digest()))
}

/// Adaptation-curve CSV for the sine task drawn from `task_seed`.
pub fn export_curve(checkpoint: &Path, task_seed: u64, points: usize) -> Result<Vec<u8>, CliError> {
    let (trainer, meta) = to_trainer(&load_checkpoint(checkpoint)?)?;
    if meta.spec.input_size() != 1 || meta.spec.output_size() != 1 {
        return Err(CliError::Validation(
            "adaptation curves need a sine-regression checkpoint".into(),
        ));
    }
    let learner = SupervisedLearner::new(meta.spec, LossKind::Mse);
    let curve = adaptation_curve(&trainer.state, &learner, &meta.sine, points, task_seed)?;
    curve_csv(&curve)
}
