//! Episodic task distributions: K-shot sine regression and a synthetic
//! N-way K-shot Gaussian-cluster classification proxy, plus the regression
//! meta-testing protocol.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::stats::{linspace, mean_ci95};
use crate::tensor::Tensor;

/// What generated a task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskDescriptor {
    Sine(SineCurve),
    Cluster { centers: Vec<Vec<f64>> },
}

/// One few-shot episode: `train` (support) and `test` (query) splits.
/// Inputs are `[m x d]`; regression targets `[m x 1]`, classification
/// targets one-hot `[m x N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub train_x: Tensor,
    pub train_y: Tensor,
    pub test_x: Tensor,
    pub test_y: Tensor,
    pub descriptor: TaskDescriptor,
}

impl FewShotTask {
    pub fn train_size(&self) -> usize {
        self.train_x.dims()[0]
    }

    pub fn test_size(&self) -> usize {
        self.test_x.dims()[0]
    }
}

/// `A sin(ωx + b)`.
pub fn eval_sine(amplitude: f64, frequency: f64, phase: f64, x: f64) -> f64 {
    amplitude * (frequency * x + phase).sin()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineCurve {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl SineCurve {
    pub fn eval(&self, x: f64) -> f64 {
        eval_sine(self.amplitude, self.frequency, self.phase, x)
    }

    /// `[n x 1]` inputs and targets for the given points.
    pub fn points(&self, xs: &[f64]) -> (Tensor, Tensor) {
        let ys: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        (
            Tensor::new(vec![xs.len(), 1], xs.to_vec()).expect("column"),
            Tensor::new(vec![xs.len(), 1], ys).expect("column"),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SineTaskConfig {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub input_range: (f64, f64),
    /// K, training examples per task.
    pub shots: usize,
    pub test_size: usize,
}

impl Default for SineTaskConfig {
    fn default() -> Self {
        SineTaskConfig {
            amplitude: (0.1, 5.0),
            frequency: (0.8, 1.2),
            phase: (0.0, PI),
            input_range: (-5.0, 5.0),
            shots: 5,
            test_size: 10,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Invalid(format!("{name} range [{lo}, {hi}]")));
    }
    Ok(())
}

impl SineTaskConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("amplitude", self.amplitude)?;
        check_range("frequency", self.frequency)?;
        check_range("phase", self.phase)?;
        check_range("input", self.input_range)?;
        if self.shots == 0 || self.test_size == 0 {
            return Err(Error::Invalid("sine shots and test_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sample_curve(&self, rng: &mut SeededRng) -> SineCurve {
        SineCurve {
            amplitude: rng.uniform(self.amplitude.0, self.amplitude.1),
            frequency: rng.uniform(self.frequency.0, self.frequency.1),
            phase: rng.uniform(self.phase.0, self.phase.1),
        }
    }

    pub fn sample_inputs(&self, n: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..n)
            .map(|_| rng.uniform(self.input_range.0, self.input_range.1))
            .collect()
    }
}

/// Draws A, ω, b, then K training inputs, then the test inputs, all
/// uniformly.
pub fn sample_sine_task(cfg: &SineTaskConfig, rng: &mut SeededRng) -> Result<FewShotTask> {
    cfg.validate()?;
    let curve = cfg.sample_curve(rng);
    let train = cfg.sample_inputs(cfg.shots, rng);
    let test = cfg.sample_inputs(cfg.test_size, rng);
    let (train_x, train_y) = curve.points(&train);
    let (test_x, test_y) = curve.points(&test);
    Ok(FewShotTask {
        train_x,
        train_y,
        test_x,
        test_y,
        descriptor: TaskDescriptor::Sine(curve),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTaskConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub input_dim: usize,
    /// Per-coordinate standard deviation around each center.
    pub spread: f64,
    pub center_range: (f64, f64),
    /// Centers are redrawn until every pair is at least this far apart.
    pub min_center_separation: f64,
}

impl Default for ClusterTaskConfig {
    fn default() -> Self {
        ClusterTaskConfig {
            ways: 5,
            shots: 1,
            queries: 15,
            input_dim: 2,
            spread: 0.5,
            center_range: (-5.0, 5.0),
            min_center_separation: 3.0,
        }
    }
}

const MAX_CENTER_DRAWS: usize = 10_000;

impl ClusterTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots == 0 || self.queries == 0 || self.input_dim == 0 {
            return Err(Error::Invalid(
                "cluster tasks need ways >= 2 and positive shots, queries, input_dim".into(),
            ));
        }
        if !(self.spread >= 0.0 && self.min_center_separation >= 0.0) {
            return Err(Error::Invalid("cluster spread and separation must be >= 0".into()));
        }
        check_range("center", self.center_range)
    }
}

fn sample_centers(cfg: &ClusterTaskConfig, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    let min_sq = cfg.min_center_separation * cfg.min_center_separation;
    for _ in 0..MAX_CENTER_DRAWS {
        let centers: Vec<Vec<f64>> = (0..cfg.ways)
            .map(|_| {
                (0..cfg.input_dim)
                    .map(|_| rng.uniform(cfg.center_range.0, cfg.center_range.1))
                    .collect()
            })
            .collect();
        let separated = centers.iter().enumerate().all(|(i, a)| {
            centers[i + 1..].iter().all(|b| {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() >= min_sq
            })
        });
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::Invalid(format!(
        "could not place {} centers {} apart",
        cfg.ways, cfg.min_center_separation
    )))
}

/// Class-ordered examples: K per class for training, `queries` per class
/// for testing, each `center + N(0, spread²I)`.
pub fn sample_cluster_task(cfg: &ClusterTaskConfig, rng: &mut SeededRng) -> Result<FewShotTask> {
    cfg.validate()?;
    let centers = sample_centers(cfg, rng)?;
    let mut draw = |per_class: usize| -> Result<(Tensor, Tensor)> {
        let m = per_class * cfg.ways;
        let mut xs = Vec::with_capacity(m * cfg.input_dim);
        let mut ys = vec![0.0; m * cfg.ways];
        for (class, center) in centers.iter().enumerate() {
            for k in 0..per_class {
                for c in center {
                    xs.push(c + cfg.spread * rng.normal());
                }
                ys[(class * per_class + k) * cfg.ways + class] = 1.0;
            }
        }
        Ok((
            Tensor::new(vec![m, cfg.input_dim], xs)?,
            Tensor::new(vec![m, cfg.ways], ys)?,
        ))
    };
    let (train_x, train_y) = draw(cfg.shots)?;
    let (test_x, test_y) = draw(cfg.queries)?;
    Ok(FewShotTask {
        train_x,
        train_y,
        test_x,
        test_y,
        descriptor: TaskDescriptor::Cluster { centers },
    })
}

/// Fraction of rows whose arg-max logit is the labelled class.
pub fn accuracy(logits: &Tensor, labels: &Tensor) -> f64 {
    let cols = labels.dims().get(1).copied().unwrap_or(1).max(1);
    let rows = logits.len() / cols;
    if rows == 0 {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks(cols)
        .zip(labels.data().chunks(cols))
        .filter(|(l, y)| argmax(l) == argmax(y))
        .count();
    hits as f64 / rows as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Regression meta-testing parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionEvalConfig {
    pub curves: usize,
    pub test_points: usize,
    pub repeats: usize,
}

impl Default for RegressionEvalConfig {
    fn default() -> Self {
        RegressionEvalConfig {
            curves: 100,
            test_points: 100,
            repeats: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub ci95_half: f64,
    /// One value per curve (or task), before aggregation.
    pub per_item: Vec<f64>,
}

impl EvalSummary {
    pub fn from_items(per_item: Vec<f64>) -> Self {
        let (mean, ci95_half) = mean_ci95(&per_item);
        EvalSummary {
            mean,
            ci95_half,
            per_item,
        }
    }
}

/// For each sampled curve, `repeats` times: draw K training inputs, let
/// `adapt_predict(train_x, train_y, grid_x)` adapt and predict on the evenly
/// spaced grid, and score MSE. Each curve's score is its mean over repeats;
/// the summary is taken across curves.
pub fn evaluate_regression<F>(
    cfg: &SineTaskConfig,
    eval: &RegressionEvalConfig,
    rng: &mut SeededRng,
    mut adapt_predict: F,
) -> Result<EvalSummary>
where
    F: FnMut(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let grid = linspace(cfg.input_range.0, cfg.input_range.1, eval.test_points);
    let mut per_curve = Vec::with_capacity(eval.curves);
    for _ in 0..eval.curves {
        let curve = cfg.sample_curve(rng);
        let (grid_x, grid_y) = curve.points(&grid);
        let mut total = 0.0;
        for _ in 0..eval.repeats {
            let xs = cfg.sample_inputs(cfg.shots, rng);
            let (train_x, train_y) = curve.points(&xs);
            let pred = adapt_predict(&train_x, &train_y, &grid_x)?;
            if pred.dims() != grid_y.dims() {
                return Err(Error::DimMismatch {
                    op: "evaluate_regression",
                    lhs: pred.dims().to_vec(),
                    rhs: grid_y.dims().to_vec(),
                });
            }
            let mse = pred
                .data()
                .iter()
                .zip(grid_y.data())
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / grid.len() as f64;
            total += mse;
        }
        per_curve.push(total / eval.repeats as f64);
    }
    Ok(EvalSummary::from_items(per_curve))
}
