//! Point-agent navigation in the plane with a diagonal-Gaussian policy, and
//! the REINFORCE surrogate loss used to adapt it.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{forward_mlp, forward_mlp_values, MlpSpec, ParamSet, LOG_VAR};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartMode {
    /// Every episode starts at the origin.
    Fixed,
    /// Start and goal both drawn from the square.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavConfig {
    pub horizon: usize,
    pub goal_threshold: f64,
    pub gamma: f64,
    /// Goals (and random starts) are uniform in `[-half_width, half_width]²`.
    pub half_width: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            horizon: 100,
            goal_threshold: 0.01,
            gamma: 0.99,
            half_width: 0.5,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Invalid("rl.horizon must be >= 1".into()));
        }
        if !(self.goal_threshold > 0.0) {
            return Err(Error::Invalid("rl.goal_threshold must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Invalid("rl.gamma must lie in [0, 1]".into()));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Invalid("rl.half_width must be > 0".into()));
        }
        Ok(())
    }
}

/// One navigation task: deterministic additive dynamics, reward
/// `-‖s' - goal‖` on the state reached.
#[derive(Clone, Debug, PartialEq)]
pub struct NavMdp {
    pub start: Point,
    pub goal: Point,
    pub horizon: usize,
    pub goal_threshold: f64,
    pub gamma: f64,
}

impl NavMdp {
    pub fn distance(&self, s: Point) -> f64 {
        (s[0] - self.goal[0]).hypot(s[1] - self.goal[1])
    }

    pub fn at_goal(&self, s: Point) -> bool {
        self.distance(s) <= self.goal_threshold
    }
}

pub fn sample_nav_task(mode: StartMode, cfg: &NavConfig, rng: &mut SeededRng) -> NavMdp {
    let w = cfg.half_width;
    let start = match mode {
        StartMode::Fixed => [0.0, 0.0],
        StartMode::Random => [rng.uniform(-w, w), rng.uniform(-w, w)],
    };
    let goal = [rng.uniform(-w, w), rng.uniform(-w, w)];
    NavMdp {
        start,
        goal,
        horizon: cfg.horizon,
        goal_threshold: cfg.goal_threshold,
        gamma: cfg.gamma,
    }
}

pub fn step(mdp: &NavMdp, state: Point, action: Point) -> Result<(Point, f64)> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    let next = [state[0] + action[0], state[1] + action[1]];
    Ok((next, -mdp.distance(next)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Point>,
    pub actions: Vec<Point>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// `Σ_t γᵗ r_t`.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    let mut g = 0.0;
    for r in traj.rewards.iter().rev() {
        g = r + gamma * g;
    }
    g
}

/// `G_t = Σ_{t' ≥ t} γ^{t'-t} r_{t'}` for every step.
pub fn rewards_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[t] = g;
    }
    out
}

/// `mean + exp(log_var / 2) · z`, one Box–Muller draw per coordinate.
pub fn sample_action(mean: &[f64], log_var: &[f64], rng: &mut SeededRng) -> Point {
    let mut a = [0.0; 2];
    for d in 0..2 {
        a[d] = mean[d] + (0.5 * log_var[d]).exp() * rng.normal();
    }
    a
}

fn log_var_of(params: &ParamSet) -> Result<Vec<f64>> {
    let lv = params
        .get(LOG_VAR)
        .ok_or_else(|| Error::Invalid("policy has no log_var entry".into()))?;
    if !lv.is_finite() {
        return Err(Error::NonFinite("policy log_var".into()));
    }
    Ok(lv.data().to_vec())
}

pub fn rollout(spec: &MlpSpec, params: &ParamSet, mdp: &NavMdp, rng: &mut SeededRng) -> Result<Trajectory> {
    Ok(rollouts(spec, params, mdp, 1, rng)?.remove(0))
}

/// `n` episodes stepped in lockstep so the policy runs on a batch of
/// states. Noise is drawn in trajectory order at every time step.
pub fn rollouts(
    spec: &MlpSpec,
    params: &ParamSet,
    mdp: &NavMdp,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Trajectory>> {
    if spec.input_size() != 2 || spec.output_size() != 2 {
        return Err(Error::Invalid("navigation policy must map 2 -> 2".into()));
    }
    let log_var = log_var_of(params)?;
    let mut trajs: Vec<Trajectory> = (0..n)
        .map(|_| Trajectory {
            states: vec![mdp.start],
            ..Default::default()
        })
        .collect();
    let mut active: Vec<usize> = if mdp.at_goal(mdp.start) {
        Vec::new()
    } else {
        (0..n).collect()
    };
    for _ in 0..mdp.horizon {
        if active.is_empty() {
            break;
        }
        let flat: Vec<f64> = active
            .iter()
            .flat_map(|&i| *trajs[i].states.last().expect("states start non-empty"))
            .collect();
        let x = Tensor::new(vec![active.len(), 2], flat)?;
        let mean = forward_mlp_values(spec, params, &x)?;
        if !mean.is_finite() {
            return Err(Error::NonFinite("policy mean".into()));
        }
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let mu = &mean.data()[2 * row..2 * row + 2];
            let a = sample_action(mu, &log_var, rng);
            let s = *trajs[i].states.last().expect("states start non-empty");
            let (next, r) = step(mdp, s, a)?;
            let t = &mut trajs[i];
            t.actions.push(a);
            t.states.push(next);
            t.rewards.push(r);
            if !mdp.at_goal(next) {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(trajs)
}

/// `-(1/N) Σ_traj Σ_t log π(a_t | s_t) G_t` for a diagonal Gaussian policy.
/// `params` is the mean network followed by `log_var`. The trajectories are
/// data; only the log-density is differentiated.
pub fn pg_surrogate_loss(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &[Var],
    trajectories: &[Trajectory],
    gamma: f64,
) -> Result<Var> {
    if trajectories.is_empty() {
        return Err(Error::Empty("trajectory list"));
    }
    if params.len() != 2 * spec.layers() + 1 {
        return Err(Error::Invalid("policy parameters must end with log_var".into()));
    }
    let rows: usize = trajectories.iter().map(Trajectory::len).sum();
    if rows == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let mut states = Vec::with_capacity(2 * rows);
    let mut actions = Vec::with_capacity(2 * rows);
    let mut weights = Vec::with_capacity(2 * rows);
    for t in trajectories {
        let g = rewards_to_go(&t.rewards, gamma);
        for k in 0..t.len() {
            states.extend(t.states[k]);
            actions.extend(t.actions[k]);
            weights.extend([g[k], g[k]]);
        }
    }
    let s = tape.constant(Tensor::new(vec![rows, 2], states)?)?;
    let a = tape.constant(Tensor::new(vec![rows, 2], actions)?)?;
    let w = tape.constant(Tensor::new(vec![rows, 2], weights)?)?;
    let log_var = params[2 * spec.layers()];

    let mean = forward_mlp(tape, spec, params, s)?;
    let diff = tape.sub(a, mean)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(log_var)?;
    let inv_var = tape.exp(neg_lv)?;
    let inv_var = tape.repeat_rows(inv_var, rows)?;
    let quad = tape.mul(sq, inv_var)?;
    let lv = tape.repeat_rows(log_var, rows)?;
    let inner = tape.add(quad, lv)?;
    let log_two_pi = tape.constant(Tensor::full(&[rows, 2], (2.0 * PI).ln()))?;
    let inner = tape.add(inner, log_two_pi)?;
    // log π = -½ (quad + log σ² + log 2π), summed over both coordinates
    let log_prob = tape.scale(inner, -0.5)?;
    let weighted = tape.mul(log_prob, w)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / trajectories.len() as f64)
}

/// Mean undiscounted return over a set of trajectories.
pub fn mean_total_reward(trajectories: &[Trajectory]) -> f64 {
    trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / trajectories.len() as f64
}

/// Trajectory counts and task counts for navigation meta-training.
#[derive(Clone, Debug, PartialEq)]
pub struct RlTrainConfig {
    /// Trajectories per task before adaptation.
    pub n1: usize,
    /// Trajectories per task after adaptation.
    pub n2: usize,
    pub meta_batch: usize,
    pub iterations: usize,
    pub eval_tasks: usize,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            n1: 20,
            n2: 20,
            meta_batch: 20,
            iterations: 100,
            eval_tasks: 600,
        }
    }
}

impl RlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rl.n1", self.n1),
            ("rl.n2", self.n2),
            ("rl.meta_batch", self.meta_batch),
            ("rl.eval_tasks", self.eval_tasks),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}
