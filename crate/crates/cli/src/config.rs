//! Run configuration: a JSON object with flat dotted keys.
//!
//! Only `experiment` is required; everything else falls back to the
//! experiment's defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use metasgd::models::{Activation, MlpSpec};
use metasgd::rl::{NavConfig, RlTrainConfig, StartMode};
use metasgd::tasks::{ClusterTaskConfig, RegressionEvalConfig, SineTaskConfig};
use metasgd::train::{MetaInitConfig, MetaLearnerKind, MetaTrainConfig, OptimizerKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Sine,
    Cluster,
    NavFixed,
    NavRandom,
}

impl Experiment {
    pub fn start_mode(self) -> Option<StartMode> {
        match self {
            Experiment::NavFixed => Some(StartMode::Fixed),
            Experiment::NavRandom => Some(StartMode::Random),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerName {
    Metasgd,
    Maml,
    Lrlstm,
}

impl From<LearnerName> for MetaLearnerKind {
    fn from(n: LearnerName) -> Self {
        match n {
            LearnerName::Metasgd => MetaLearnerKind::MetaSgd,
            LearnerName::Maml => MetaLearnerKind::Maml,
            LearnerName::Lrlstm => MetaLearnerKind::LrLstm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// The file as written. Every field is optional except `experiment`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_learner: Option<LearnerName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,

    #[serde(rename = "model.hidden", skip_serializing_if = "Option::is_none")]
    pub model_hidden: Option<Vec<usize>>,
    #[serde(rename = "model.activation", skip_serializing_if = "Option::is_none")]
    pub model_activation: Option<ActivationName>,

    #[serde(rename = "train.iterations", skip_serializing_if = "Option::is_none")]
    pub train_iterations: Option<usize>,
    #[serde(rename = "train.meta_batch", skip_serializing_if = "Option::is_none")]
    pub train_meta_batch: Option<usize>,
    #[serde(rename = "train.outer_lr", skip_serializing_if = "Option::is_none")]
    pub train_outer_lr: Option<f64>,
    #[serde(rename = "train.optimizer", skip_serializing_if = "Option::is_none")]
    pub train_optimizer: Option<OptimizerName>,
    #[serde(rename = "train.l2", skip_serializing_if = "Option::is_none")]
    pub train_l2: Option<f64>,
    #[serde(rename = "train.first_order", skip_serializing_if = "Option::is_none")]
    pub train_first_order: Option<bool>,
    #[serde(rename = "train.log_interval", skip_serializing_if = "Option::is_none")]
    pub train_log_interval: Option<usize>,
    #[serde(rename = "train.record_wall_clock", skip_serializing_if = "Option::is_none")]
    pub train_record_wall_clock: Option<bool>,

    #[serde(rename = "metasgd.alpha_init", skip_serializing_if = "Option::is_none")]
    pub metasgd_alpha_init: Option<f64>,
    #[serde(rename = "metasgd.learn_alpha", skip_serializing_if = "Option::is_none")]
    pub metasgd_learn_alpha: Option<bool>,
    #[serde(rename = "maml.alpha", skip_serializing_if = "Option::is_none")]
    pub maml_alpha: Option<f64>,
    #[serde(rename = "maml.inner_steps", skip_serializing_if = "Option::is_none")]
    pub maml_inner_steps: Option<usize>,
    #[serde(rename = "lstm.hidden", skip_serializing_if = "Option::is_none")]
    pub lstm_hidden: Option<usize>,
    #[serde(rename = "lstm.beta", skip_serializing_if = "Option::is_none")]
    pub lstm_beta: Option<f64>,
    #[serde(rename = "lstm.steps", skip_serializing_if = "Option::is_none")]
    pub lstm_steps: Option<usize>,
    #[serde(rename = "lstm.split_layer", skip_serializing_if = "Option::is_none")]
    pub lstm_split_layer: Option<usize>,

    #[serde(rename = "sine.amplitude", skip_serializing_if = "Option::is_none")]
    pub sine_amplitude: Option<(f64, f64)>,
    #[serde(rename = "sine.frequency", skip_serializing_if = "Option::is_none")]
    pub sine_frequency: Option<(f64, f64)>,
    #[serde(rename = "sine.phase", skip_serializing_if = "Option::is_none")]
    pub sine_phase: Option<(f64, f64)>,
    #[serde(rename = "sine.input_range", skip_serializing_if = "Option::is_none")]
    pub sine_input_range: Option<(f64, f64)>,
    #[serde(rename = "sine.shots", skip_serializing_if = "Option::is_none")]
    pub sine_shots: Option<usize>,
    #[serde(rename = "sine.test_size", skip_serializing_if = "Option::is_none")]
    pub sine_test_size: Option<usize>,

    #[serde(rename = "cluster.ways", skip_serializing_if = "Option::is_none")]
    pub cluster_ways: Option<usize>,
    #[serde(rename = "cluster.shots", skip_serializing_if = "Option::is_none")]
    pub cluster_shots: Option<usize>,
    #[serde(rename = "cluster.queries", skip_serializing_if = "Option::is_none")]
    pub cluster_queries: Option<usize>,
    #[serde(rename = "cluster.input_dim", skip_serializing_if = "Option::is_none")]
    pub cluster_input_dim: Option<usize>,
    #[serde(rename = "cluster.spread", skip_serializing_if = "Option::is_none")]
    pub cluster_spread: Option<f64>,
    #[serde(rename = "cluster.center_range", skip_serializing_if = "Option::is_none")]
    pub cluster_center_range: Option<(f64, f64)>,
    #[serde(rename = "cluster.min_center_separation", skip_serializing_if = "Option::is_none")]
    pub cluster_min_center_separation: Option<f64>,

    #[serde(rename = "rl.n1", skip_serializing_if = "Option::is_none")]
    pub rl_n1: Option<usize>,
    #[serde(rename = "rl.n2", skip_serializing_if = "Option::is_none")]
    pub rl_n2: Option<usize>,
    #[serde(rename = "rl.eval_tasks", skip_serializing_if = "Option::is_none")]
    pub rl_eval_tasks: Option<usize>,
    #[serde(rename = "rl.horizon", skip_serializing_if = "Option::is_none")]
    pub rl_horizon: Option<usize>,
    #[serde(rename = "rl.goal_threshold", skip_serializing_if = "Option::is_none")]
    pub rl_goal_threshold: Option<f64>,
    #[serde(rename = "rl.gamma", skip_serializing_if = "Option::is_none")]
    pub rl_gamma: Option<f64>,

    #[serde(rename = "eval.curves", skip_serializing_if = "Option::is_none")]
    pub eval_curves: Option<usize>,
    #[serde(rename = "eval.test_points", skip_serializing_if = "Option::is_none")]
    pub eval_test_points: Option<usize>,
    #[serde(rename = "eval.repeats", skip_serializing_if = "Option::is_none")]
    pub eval_repeats: Option<usize>,
    #[serde(rename = "eval.shots", skip_serializing_if = "Option::is_none")]
    pub eval_shots: Option<Vec<usize>>,
    #[serde(rename = "eval.episodes", skip_serializing_if = "Option::is_none")]
    pub eval_episodes: Option<usize>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub meta_learner: MetaLearnerKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: MetaTrainConfig,
    pub init: MetaInitConfig,
    pub learn_alpha: bool,
    pub sine: SineTaskConfig,
    pub cluster: ClusterTaskConfig,
    pub nav: NavConfig,
    pub rl: RlTrainConfig,
    pub eval: RegressionEvalConfig,
    pub eval_shots: Vec<usize>,
    pub eval_episodes: usize,
}

impl RunConfig {
    /// Defaults for an experiment before any overrides.
    pub fn defaults(experiment: Experiment) -> Self {
        let nav = experiment.start_mode().is_some();
        let (iterations, meta_batch) = match experiment {
            Experiment::Sine => (60_000, 4),
            Experiment::Cluster => (10_000, 4),
            Experiment::NavFixed | Experiment::NavRandom => (100, 20),
        };
        RunConfig {
            experiment,
            meta_learner: MetaLearnerKind::MetaSgd,
            seed: 0,
            output_dir: PathBuf::from("out"),
            hidden: if nav { vec![100, 100] } else { vec![40, 40] },
            activation: Activation::Relu,
            train: MetaTrainConfig {
                iterations,
                meta_batch,
                ..Default::default()
            },
            init: MetaInitConfig::default(),
            learn_alpha: true,
            sine: SineTaskConfig::default(),
            cluster: ClusterTaskConfig::default(),
            nav: NavConfig::default(),
            rl: RlTrainConfig {
                iterations,
                meta_batch,
                ..Default::default()
            },
            eval: RegressionEvalConfig::default(),
            eval_shots: vec![5, 10, 20],
            eval_episodes: 1000,
        }
    }

    pub fn from_file(file: &ConfigFile) -> Result<Self, CliError> {
        let experiment = file
            .experiment
            .ok_or_else(|| CliError::Validation("missing required key `experiment`".into()))?;
        let mut c = RunConfig::defaults(experiment);
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v.into();
                }
            };
        }
        set!(file.meta_learner => c.meta_learner);
        set!(file.seed => c.seed);
        set!(file.output_dir => c.output_dir);
        set!(file.model_hidden => c.hidden);
        if let Some(a) = file.model_activation {
            c.activation = match a {
                ActivationName::Relu => Activation::Relu,
                ActivationName::Tanh => Activation::Tanh,
            };
        }
        set!(file.train_iterations => c.train.iterations);
        set!(file.train_meta_batch => c.train.meta_batch);
        set!(file.train_outer_lr => c.train.outer_lr);
        if let Some(o) = file.train_optimizer {
            c.train.optimizer = match o {
                OptimizerName::Adam => OptimizerKind::Adam,
                OptimizerName::Sgd => OptimizerKind::Sgd,
            };
        }
        set!(file.train_l2 => c.train.l2);
        set!(file.train_first_order => c.train.first_order);
        set!(file.train_log_interval => c.train.log_interval);
        set!(file.train_record_wall_clock => c.train.record_wall_clock);
        c.init.alpha_init = file.metasgd_alpha_init;
        set!(file.metasgd_learn_alpha => c.learn_alpha);
        set!(file.maml_alpha => c.init.maml_alpha);
        set!(file.maml_inner_steps => c.init.maml_steps);
        set!(file.lstm_hidden => c.init.lstm.hidden);
        set!(file.lstm_beta => c.init.lstm.beta);
        set!(file.lstm_steps => c.init.lstm.steps);
        set!(file.lstm_split_layer => c.init.lstm.split_layer);
        set!(file.sine_amplitude => c.sine.amplitude);
        set!(file.sine_frequency => c.sine.frequency);
        set!(file.sine_phase => c.sine.phase);
        set!(file.sine_input_range => c.sine.input_range);
        set!(file.sine_shots => c.sine.shots);
        set!(file.sine_test_size => c.sine.test_size);
        set!(file.cluster_ways => c.cluster.ways);
        set!(file.cluster_shots => c.cluster.shots);
        set!(file.cluster_queries => c.cluster.queries);
        set!(file.cluster_input_dim => c.cluster.input_dim);
        set!(file.cluster_spread => c.cluster.spread);
        set!(file.cluster_center_range => c.cluster.center_range);
        set!(file.cluster_min_center_separation => c.cluster.min_center_separation);
        set!(file.rl_n1 => c.rl.n1);
        set!(file.rl_n2 => c.rl.n2);
        set!(file.rl_eval_tasks => c.rl.eval_tasks);
        set!(file.rl_horizon => c.nav.horizon);
        set!(file.rl_goal_threshold => c.nav.goal_threshold);
        set!(file.rl_gamma => c.nav.gamma);
        set!(file.eval_curves => c.eval.curves);
        set!(file.eval_test_points => c.eval.test_points);
        set!(file.eval_repeats => c.eval.repeats);
        set!(file.eval_shots => c.eval_shots);
        set!(file.eval_episodes => c.eval_episodes);
        c.train.seed = c.seed;
        c.rl.iterations = c.train.iterations;
        c.rl.meta_batch = c.train.meta_batch;
        c.validate()?;
        Ok(c)
    }

    /// Every key written out, so the file alone reproduces the run.
    pub fn to_file(&self) -> ConfigFile {
        let learner = match self.meta_learner {
            MetaLearnerKind::MetaSgd => LearnerName::Metasgd,
            MetaLearnerKind::Maml => LearnerName::Maml,
            MetaLearnerKind::LrLstm => LearnerName::Lrlstm,
        };
        ConfigFile {
            experiment: Some(self.experiment),
            meta_learner: Some(learner),
            seed: Some(self.seed),
            output_dir: Some(self.output_dir.clone()),
            model_hidden: Some(self.hidden.clone()),
            model_activation: Some(match self.activation {
                Activation::Relu => ActivationName::Relu,
                Activation::Tanh => ActivationName::Tanh,
            }),
            train_iterations: Some(self.train.iterations),
            train_meta_batch: Some(self.train.meta_batch),
            train_outer_lr: Some(self.train.outer_lr),
            train_optimizer: Some(match self.train.optimizer {
                OptimizerKind::Adam => OptimizerName::Adam,
                OptimizerKind::Sgd => OptimizerName::Sgd,
            }),
            train_l2: Some(self.train.l2),
            train_first_order: Some(self.train.first_order),
            train_log_interval: Some(self.train.log_interval),
            train_record_wall_clock: Some(self.train.record_wall_clock),
            metasgd_alpha_init: self.init.alpha_init,
            metasgd_learn_alpha: Some(self.learn_alpha),
            maml_alpha: Some(self.init.maml_alpha),
            maml_inner_steps: Some(self.init.maml_steps),
            lstm_hidden: Some(self.init.lstm.hidden),
            lstm_beta: Some(self.init.lstm.beta),
            lstm_steps: Some(self.init.lstm.steps),
            lstm_split_layer: Some(self.init.lstm.split_layer),
            sine_amplitude: Some(self.sine.amplitude),
            sine_frequency: Some(self.sine.frequency),
            sine_phase: Some(self.sine.phase),
            sine_input_range: Some(self.sine.input_range),
            sine_shots: Some(self.sine.shots),
            sine_test_size: Some(self.sine.test_size),
            cluster_ways: Some(self.cluster.ways),
            cluster_shots: Some(self.cluster.shots),
            cluster_queries: Some(self.cluster.queries),
            cluster_input_dim: Some(self.cluster.input_dim),
            cluster_spread: Some(self.cluster.spread),
            cluster_center_range: Some(self.cluster.center_range),
            cluster_min_center_separation: Some(self.cluster.min_center_separation),
            rl_n1: Some(self.rl.n1),
            rl_n2: Some(self.rl.n2),
            rl_eval_tasks: Some(self.rl.eval_tasks),
            rl_horizon: Some(self.nav.horizon),
            rl_goal_threshold: Some(self.nav.goal_threshold),
            rl_gamma: Some(self.nav.gamma),
            eval_curves: Some(self.eval.curves),
            eval_test_points: Some(self.eval.test_points),
            eval_repeats: Some(self.eval.repeats),
            eval_shots: Some(self.eval_shots.clone()),
            eval_episodes: Some(self.eval_episodes),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form. The output directory is left
    /// out: it says where results go, not what they are.
    pub fn digest(&self) -> [u8; 32] {
        let file = ConfigFile {
            output_dir: None,
            ..self.to_file()
        };
        let canonical = serde_json::to_vec(&file).expect("config serializes");
        Sha256::digest(&canonical).into()
    }

    /// Layer sizes of the learner network for this experiment.
    pub fn learner_spec(&self) -> Result<MlpSpec, CliError> {
        let (input, output) = match self.experiment {
            Experiment::Sine => (1, 1),
            Experiment::Cluster => (self.cluster.input_dim, self.cluster.ways),
            Experiment::NavFixed | Experiment::NavRandom => (2, 2),
        };
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        Ok(MlpSpec::new(sizes, self.activation)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |key: &str, why: &str| Err(CliError::Validation(format!("{key}: {why}")));
        if self.hidden.iter().any(|&h| h == 0) {
            return invalid("model.hidden", "layer sizes must be >= 1");
        }
        if let Some(a) = self.init.alpha_init {
            if !a.is_finite() {
                return invalid("metasgd.alpha_init", "must be finite");
            }
        }
        if !(self.init.maml_alpha > 0.0) {
            return invalid("maml.alpha", "must be > 0");
        }
        if self.init.lstm.steps == 0 {
            return invalid("lstm.steps", "must be >= 1");
        }
        if self.init.lstm.hidden == 0 {
            return invalid("lstm.hidden", "must be >= 1");
        }
        if !(self.init.lstm.beta > 0.0) {
            return invalid("lstm.beta", "must be > 0");
        }
        if self.meta_learner == MetaLearnerKind::LrLstm && self.init.lstm.split_layer > self.hidden.len() {
            return invalid("lstm.split_layer", "must leave at least the output layer adaptable");
        }
        if self.eval_shots.is_empty() || self.eval_shots.contains(&0) {
            return invalid("eval.shots", "must list positive shot counts");
        }
        if self.eval.curves == 0 || self.eval.repeats == 0 || self.eval.test_points == 0 {
            return invalid("eval.curves", "curves, repeats and test_points must be >= 1");
        }
        if self.eval_episodes == 0 {
            return invalid("eval.episodes", "must be >= 1");
        }
        self.train.validate()?;
        self.sine.validate()?;
        self.cluster.validate()?;
        self.nav.validate()?;
        self.rl.validate()?;
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path.is_empty() || path == "." {
            CliError::Validation(format!("config: {inner}"))
        } else {
            CliError::Validation(format!("{path}: {inner}"))
        }
    })?;
    RunConfig::from_file(&file)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    parse_config_str(&text)
}
