//! Finite-difference check suites behind `metasgd gradcheck`.

use std::fmt::Write as _;

use metasgd::autodiff::inject_vjp_fault;
use metasgd::gradcheck::{max_rel_error, numeric_grad, FD_STEP};
use metasgd::metalearners::{
    init_lstm, lstm_adapt, lstm_input_size, maml_adapt, meta_loss, meta_sgd_adapt, LossKind,
    SupervisedLearner,
};
use metasgd::models::{init_mlp, init_policy, split_params, Activation, MlpSpec, ParamSet};
use metasgd::rl::{pg_surrogate_loss, rollouts, NavMdp};
use metasgd::{Error, Result, SeededRng, Tape, Tensor, Var};

use crate::error::CliError;

pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const META_TOL: f64 = 1e-5;
pub const CLOSED_FORM_TOL: f64 = 1e-9;

/// Every op name the tape can record.
pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "scale", "square", "exp", "log", "relu", "tanh", "sigmoid",
    "sin", "cos", "matmul", "add_bias_row", "sum_rows", "repeat_rows", "sum", "mean", "broadcast",
    "reshape", "concat", "slice", "pad", "log_softmax",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Ops whose backward pass the suite exercises.
    pub ops: Vec<&'static str>,
    pub error: Option<String>,
    /// Set when the suite's tape holds only the op under test and `sum`.
    pub isolating: bool,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    /// Ops used by every failing suite and by no passing one. Isolating
    /// suites are consulted first; the rest only when all of those pass.
    pub fn suspects(&self) -> Vec<&'static str> {
        let isolating: Vec<&SuiteResult> = self.suites.iter().filter(|s| s.isolating).collect();
        let pool = if isolating.iter().any(|s| !s.passed()) {
            isolating
        } else {
            self.suites.iter().collect()
        };
        let (failing, passing): (Vec<&SuiteResult>, Vec<&SuiteResult>) =
            pool.into_iter().partition(|s| !s.passed());
        let Some(first) = failing.first() else {
            return Vec::new();
        };
        first
            .ops
            .iter()
            .copied()
            .filter(|op| failing.iter().all(|s| s.ops.contains(op)))
            .filter(|op| passing.iter().all(|s| !s.ops.contains(op)))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            let _ = write!(
                out,
                "{status} {:<36} max_err={:.3e} tol={:.0e}",
                s.name, s.max_error, s.tolerance
            );
            if let Some(e) = &s.error {
                let _ = write!(out, " error: {e}");
            }
            out.push('\n');
        }
        let failed: Vec<&str> = self.suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
        if failed.is_empty() {
            let _ = writeln!(out, "all {} suites passed", self.suites.len());
        } else {
            let _ = writeln!(out, "{} of {} suites failed: {}", failed.len(), self.suites.len(), failed.join(", "));
            let suspects = self.suspects();
            if !suspects.is_empty() {
                let _ = writeln!(out, "offending op: {}", suspects.join(", "));
            }
        }
        out
    }
}

/// Maps a user-supplied op name to its static form.
pub fn op_name(name: &str) -> Result<&'static str, CliError> {
    OPS.iter()
        .copied()
        .find(|&op| op == name)
        .ok_or_else(|| CliError::Validation(format!("unknown op `{name}`; expected one of {}", OPS.join(", "))))
}

struct FaultGuard;

impl FaultGuard {
    fn set(op: Option<&'static str>) -> Self {
        inject_vjp_fault(op);
        FaultGuard
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        inject_vjp_fault(None);
    }
}

type ScalarFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// Tape gradient, with the ops recorded up to the point of differentiation.
fn analytic(f: &ScalarFn<'_>, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<&'static str>)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.var(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let ops = tape.op_names();
    let grads = tape.grad(out, &vars, false)?;
    let values = grads.iter().map(|&g| tape.value(g).cloned()).collect::<Result<_>>()?;
    Ok((values, ops))
}

fn fd_check(f: &ScalarFn<'_>, inputs: &[Tensor]) -> Result<(f64, Vec<&'static str>)> {
    let (a, ops) = analytic(f, inputs)?;
    let n = numeric_grad(f, inputs, FD_STEP)?;
    Ok((max_rel_error(&a, &n), ops))
}

fn weights_for(dims: &[usize], salt: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7 + salt).sin()).collect();
    Tensor::new(dims.to_vec(), data).expect("dims match")
}

/// `Σ out ∘ w` for a fixed `w`, so every output element matters.
fn weighted(tape: &mut Tape, out: Var, salt: f64) -> Result<Var> {
    let w = weights_for(tape.dims(out)?, salt);
    let w = tape.constant(w)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// `Σ_i <w_i, ∂f/∂x_i>`, built with `create_graph`, so its gradient is a
/// Hessian-vector product.
fn second_order<'a>(f: ScalarFn<'a>, n: usize) -> ScalarFn<'a> {
    Box::new(move |tape: &mut Tape, v: &[Var]| {
        let out = f(tape, v)?;
        let grads = tape.grad(out, &v[..n], true)?;
        let mut acc: Option<Var> = None;
        for (i, g) in grads.into_iter().enumerate() {
            let term = weighted(tape, g, 0.3 + i as f64)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        acc.ok_or(Error::Empty("inputs"))
    })
}

fn run_suite(name: &str, tolerance: f64, body: impl FnOnce() -> Result<(f64, Vec<&'static str>)>) -> SuiteResult {
    match body() {
        Ok((max_error, ops)) => SuiteResult {
            name: name.to_string(),
            max_error,
            tolerance,
            ops,
            error: None,
            isolating: false,
        },
        Err(e) => SuiteResult {
            name: name.to_string(),
            max_error: f64::INFINITY,
            tolerance,
            ops: Vec::new(),
            error: Some(e.to_string()),
            isolating: false,
        },
    }
}

/// First- and second-order check of one function; the worse error counts.
fn both_orders(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'static, inputs: &[Tensor]) -> Result<(f64, Vec<&'static str>)> {
    let first: ScalarFn<'static> = Box::new(f.clone());
    let (e1, mut ops) = fd_check(&first, inputs)?;
    let (e2, ops2) = fd_check(&second_order(Box::new(f), inputs.len()), inputs)?;
    ops.extend(ops2);
    ops.sort_unstable();
    ops.dedup();
    Ok((e1.max(e2), ops))
}

fn random(rng: &mut SeededRng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("dims match")
}

/// Magnitudes in [0.2, 1.5] with random signs, away from kinks and poles.
fn away_from_zero(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
    let mag = random(rng, dims, 0.2, 1.5);
    let sign = random(rng, dims, -1.0, 1.0);
    mag.zip_map(&sign, |m, s| if s < 0.0 { -m } else { m })
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Each op on its own, unreduced, with inputs that keep it smooth.
fn op_suites(rng: &mut SeededRng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let x = random(rng, &[2, 3], -1.5, 1.5);
    let y = random(rng, &[2, 3], -1.5, 1.5);
    let nz = away_from_zero(rng, &[2, 3]);
    let pos = random(rng, &[2, 3], 0.2, 3.0);
    let m = random(rng, &[3, 4], -1.0, 1.0);
    let bias = random(rng, &[3], -1.0, 1.0);
    let s = random(rng, &[1], -1.0, 1.0);
    vec![
        ("add", |t, v| t.add(v[0], v[1]), vec![x.clone(), y.clone()]),
        ("sub", |t, v| t.sub(v[0], v[1]), vec![x.clone(), y.clone()]),
        ("mul", |t, v| t.mul(v[0], v[1]), vec![x.clone(), y.clone()]),
        ("div", |t, v| t.div(v[0], v[1]), vec![x.clone(), nz.clone()]),
        ("neg", |t, v| t.neg(v[0]), vec![x.clone()]),
        ("scale", |t, v| t.scale(v[0], -1.7), vec![x.clone()]),
        ("square", |t, v| t.square(v[0]), vec![x.clone()]),
        ("exp", |t, v| t.exp(v[0]), vec![x.clone()]),
        ("log", |t, v| t.log(v[0]), vec![pos]),
        ("relu", |t, v| t.relu(v[0]), vec![nz.clone()]),
        ("tanh", |t, v| t.tanh(v[0]), vec![x.clone()]),
        ("sigmoid", |t, v| t.sigmoid(v[0]), vec![x.clone()]),
        ("sin", |t, v| t.sin(v[0]), vec![x.clone()]),
        ("cos", |t, v| t.cos(v[0]), vec![x.clone()]),
        ("matmul", |t, v| t.matmul(v[0], v[1]), vec![x.clone(), m]),
        ("add_bias_row", |t, v| t.add_bias_row(v[0], v[1]), vec![x.clone(), bias.clone()]),
        ("sum_rows", |t, v| t.sum_rows(v[0]), vec![x.clone()]),
        ("repeat_rows", |t, v| t.repeat_rows(v[0], 2), vec![bias]),
        ("sum", |t, v| t.sum(v[0]), vec![x.clone()]),
        ("mean", |t, v| t.mean(v[0]), vec![x.clone()]),
        ("broadcast", |t, v| t.broadcast(v[0], &[2, 3]), vec![s]),
        ("reshape", |t, v| t.reshape(v[0], &[3, 2]), vec![x.clone()]),
        ("concat", |t, v| t.concat(&[v[0], v[1]]), vec![x.clone(), y]),
        ("slice", |t, v| t.slice(v[0], 1, &[2, 2]), vec![x.clone()]),
        ("log_softmax", |t, v| t.log_softmax(v[0]), vec![x]),
    ]
}

/// First order on `sum(op(x))`, so the tape holds nothing but the op and
/// `sum`. Scalar outputs are not reduced again; two sign flips would cancel.
fn isolated_first_order(op: OpFn, inputs: &[Tensor]) -> Result<(f64, Vec<&'static str>)> {
    let f: ScalarFn<'static> = Box::new(move |t: &mut Tape, v: &[Var]| {
        let y = op(t, v)?;
        if t.value(y)?.len() == 1 {
            return Ok(y);
        }
        t.sum(y)
    });
    fd_check(&f, inputs)
}

/// Second order on `Σ w∘op(x)²`; squaring gives linear ops a non-zero
/// Hessian so their backward ops are exercised too.
fn squared_second_order(op: OpFn, inputs: &[Tensor]) -> Result<(f64, Vec<&'static str>)> {
    let f: ScalarFn<'static> = Box::new(move |t: &mut Tape, v: &[Var]| {
        let y = op(t, v)?;
        let y = t.square(y)?;
        weighted(t, y, 0.5)
    });
    fd_check(&second_order(f, inputs.len()), inputs)
}

fn one_hot(rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        data[r * cols + (r * 3 + 1) % cols] = 1.0;
    }
    Tensor::new(vec![rows, cols], data).expect("dims match")
}

fn loss_suites(rng: &mut SeededRng, report: &mut Report) {
    let p = random(rng, &[3, 4], -2.0, 2.0);
    let target = random(rng, &[3, 4], -2.0, 2.0);
    report.suites.push(run_suite("loss mse (1st+2nd order)", FIRST_ORDER_TOL, || {
        both_orders(move |t: &mut Tape, v: &[Var]| t.mse_loss(v[0], &target), &[p.clone()])
    }));
    let labels = one_hot(3, 4);
    report.suites.push(run_suite("loss cross-entropy (1st+2nd order)", FIRST_ORDER_TOL, || {
        both_orders(move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels), &[p])
    }));

    report.suites.push(run_suite("loss policy-gradient surrogate", FIRST_ORDER_TOL, || {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Tanh)?;
        let mut params = init_policy(&spec, rng)?;
        perturb(&mut params, rng, 0.8);
        let mdp = NavMdp {
            start: [0.0, 0.0],
            goal: [0.3, -0.2],
            horizon: 4,
            goal_threshold: 0.01,
            gamma: 0.9,
        };
        let trajs = rollouts(&spec, &params, &mdp, 2, rng)?;
        let f: ScalarFn<'_> = Box::new(|t: &mut Tape, v: &[Var]| pg_surrogate_loss(t, &spec, v, &trajs, 0.9));
        fd_check(&f, &params.tensors().cloned().collect::<Vec<_>>())
    }));
}

fn perturb(p: &mut ParamSet, rng: &mut SeededRng, scale: f64) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform(-scale, scale);
        }
    }
}

/// 1-2-1 tanh learner with three training and two test points.
struct Fixture {
    learner: SupervisedLearner,
    theta: ParamSet,
    split: usize,
    xs: Tensor,
    ys: Tensor,
    qx: Tensor,
    qy: Tensor,
}

fn fixture(rng: &mut SeededRng) -> Result<Fixture> {
    let spec = MlpSpec::new(vec![1, 2, 1], Activation::Tanh)?;
    let mut theta = init_mlp(&spec, rng)?;
    perturb(&mut theta, rng, 1.0);
    Ok(Fixture {
        learner: SupervisedLearner::new(spec, LossKind::Mse),
        split: split_params(&theta, 1)?.shared.len(),
        theta,
        xs: Tensor::new(vec![3, 1], vec![-0.5, 0.2, 0.9])?,
        ys: Tensor::new(vec![3, 1], vec![0.3, -0.1, 0.6])?,
        qx: Tensor::new(vec![2, 1], vec![0.1, -0.8])?,
        qy: Tensor::new(vec![2, 1], vec![0.2, 0.4])?,
    })
}

fn meta_suites(rng: &mut SeededRng, report: &mut Report) {
    let fx = match fixture(rng) {
        Ok(f) => f,
        Err(e) => {
            report.suites.push(run_suite("meta-gradient fixture", META_TOL, || Err(e)));
            return;
        }
    };
    let n = fx.theta.len();
    let theta: Vec<Tensor> = fx.theta.tensors().cloned().collect();

    report.suites.push(run_suite("meta-gradient Meta-SGD", META_TOL, || {
        let f: ScalarFn<'_> = Box::new(|tape: &mut Tape, v: &[Var]| {
            let (t, a) = v.split_at(n);
            let mut train = |tape: &mut Tape, p: &[Var]| fx.learner.loss(tape, p, &fx.xs, &fx.ys);
            let res = meta_sgd_adapt(tape, t, a, &mut train, false)?;
            meta_loss(tape, &fx.learner, &res, &fx.qx, &fx.qy)
        });
        let mut inputs = theta.clone();
        inputs.extend(fx.theta.filled(0.3).tensors().cloned());
        fd_check(&f, &inputs)
    }));

    report.suites.push(run_suite("meta-gradient MAML (3 inner steps)", META_TOL, || {
        let f: ScalarFn<'_> = Box::new(|tape: &mut Tape, v: &[Var]| {
            let mut train = |tape: &mut Tape, p: &[Var]| fx.learner.loss(tape, p, &fx.xs, &fx.ys);
            let res = maml_adapt(tape, v, 0.4, 3, &mut train, false)?;
            meta_loss(tape, &fx.learner, &res, &fx.qx, &fx.qy)
        });
        fd_check(&f, &theta)
    }));

    report.suites.push(run_suite("meta-gradient LSTM BPTT (T=2)", META_TOL, || {
        let hidden = 4;
        let n2 = fx.theta.tensors().skip(fx.split).map(Tensor::len).sum();
        let mut phi = init_lstm(lstm_input_size(n2), hidden, rng)?;
        perturb(&mut phi, rng, 0.5);
        let n_phi = phi.len();
        let split = fx.split;
        let f: ScalarFn<'_> = Box::new(|tape: &mut Tape, v: &[Var]| {
            let (phi, rest) = v.split_at(n_phi);
            let (t1, t2) = rest.split_at(split);
            let mut train = |tape: &mut Tape, p: &[Var]| fx.learner.loss(tape, p, &fx.xs, &fx.ys);
            let res = lstm_adapt(tape, phi, 0.5, hidden, t1, t2, 2, &mut train, false)?;
            meta_loss(tape, &fx.learner, &res, &fx.qx, &fx.qy)
        });
        let mut inputs: Vec<Tensor> = phi.tensors().cloned().collect();
        inputs.extend(theta.iter().cloned());
        fd_check(&f, &inputs)
    }));
}

const QA: [[f64; 3]; 3] = [[2.0, 0.5, 0.0], [0.5, 1.5, -0.3], [0.0, -0.3, 1.0]];
const QB: [[f64; 3]; 3] = [[1.0, 0.2, 0.1], [0.2, 2.0, 0.0], [0.1, 0.0, 0.5]];
const QC: [f64; 3] = [0.3, -0.7, 1.1];

fn matvec(m: &[[f64; 3]; 3], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `½ (v − c)ᵀ M (v − c)` for a `[3]` var.
fn quad(tape: &mut Tape, v: Var, m: &[[f64; 3]; 3], c: &[f64]) -> Result<Var> {
    let c = tape.constant(Tensor::vector(c.to_vec()))?;
    let d = tape.sub(v, c)?;
    let col = tape.reshape(d, &[3, 1])?;
    let mv = tape.constant(Tensor::from_rows(&[&m[0], &m[1], &m[2]])?)?;
    let md = tape.matmul(mv, col)?;
    let md = tape.reshape(md, &[3])?;
    let prod = tape.mul(d, md)?;
    let s = tape.sum(prod)?;
    tape.scale(s, 0.5)
}

/// Tape outer gradient of the test quadratic after one Meta-SGD step on the
/// training quadratic.
fn quad_outer(theta: &[f64], alpha: &[f64], first_order: bool) -> Result<(Vec<f64>, Vec<f64>, Vec<&'static str>)> {
    let mut tape = Tape::new();
    let t = tape.var(Tensor::vector(theta.to_vec()), true)?;
    let a = tape.var(Tensor::vector(alpha.to_vec()), true)?;
    let mut train = |tape: &mut Tape, p: &[Var]| quad(tape, p[0], &QA, &[0.0; 3]);
    let res = meta_sgd_adapt(&mut tape, &[t], &[a], &mut train, first_order)?;
    let test = quad(&mut tape, res.adapted[0], &QB, &QC)?;
    let ops = tape.op_names();
    let g = tape.grad(test, &[t, a], false)?;
    Ok((tape.value(g[0])?.data().to_vec(), tape.value(g[1])?.data().to_vec(), ops))
}

/// With `θ' = θ − α∘(Aθ)` and `r = B(θ' − c)`:
/// `∇θ = r − A(α∘r)`, `∇α = −(Aθ)∘r`, and the Hessian term is `A(α∘r)`.
fn quad_closed_form(theta: &[f64], alpha: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let at = matvec(&QA, theta);
    let diff: Vec<f64> = (0..3).map(|i| theta[i] - alpha[i] * at[i] - QC[i]).collect();
    let r = matvec(&QB, &diff);
    let ar: Vec<f64> = (0..3).map(|i| alpha[i] * r[i]).collect();
    let hess = matvec(&QA, &ar);
    let g_theta = (0..3).map(|i| r[i] - hess[i]).collect();
    let g_alpha = (0..3).map(|i| -at[i] * r[i]).collect();
    (g_theta, g_alpha, hess)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn quadratic_suites(report: &mut Report) {
    let theta = [0.8, -1.2, 0.5];
    let alpha = [0.1, 0.05, 0.2];
    let (et, ea, hess) = quad_closed_form(&theta, &alpha);
    report.suites.push(run_suite("quadratic closed-form meta-gradient", CLOSED_FORM_TOL, || {
        let (gt, ga, ops) = quad_outer(&theta, &alpha, false)?;
        Ok((max_abs_diff(&gt, &et).max(max_abs_diff(&ga, &ea)), ops))
    }));
    report.suites.push(run_suite("quadratic first-order Hessian term", CLOSED_FORM_TOL, || {
        let (gt, _, _) = quad_outer(&theta, &alpha, false)?;
        let (ft, fa, ops) = quad_outer(&theta, &alpha, true)?;
        let dropped: Vec<f64> = (0..3).map(|i| ft[i] - gt[i]).collect();
        Ok((max_abs_diff(&dropped, &hess).max(max_abs_diff(&fa, &ea)), ops))
    }));
}

/// Runs every suite, optionally with the sign of one op's backward pass
/// flipped.
pub fn run_all(fault: Option<&'static str>) -> Report {
    let _guard = FaultGuard::set(fault);
    let mut rng = SeededRng::new(20_170_101);
    let mut report = Report::default();
    for (name, op, inputs) in op_suites(&mut rng) {
        let mut first = run_suite(&format!("op {name}"), FIRST_ORDER_TOL, || {
            isolated_first_order(op, &inputs)
        });
        first.isolating = true;
        report.suites.push(first);
        report.suites.push(run_suite(&format!("op {name} 2nd order"), FIRST_ORDER_TOL, || {
            squared_second_order(op, &inputs)
        }));
    }
    loss_suites(&mut rng, &mut report);
    meta_suites(&mut rng, &mut report);
    quadratic_suites(&mut report);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_agrees_with_finite_differences_of_itself() {
        // The hand formula is checked against central differences of the
        // post-step test loss computed in plain f64.
        let theta = [0.4, 0.9, -0.6];
        let alpha = [0.2, -0.1, 0.07];
        let loss = |t: &[f64], a: &[f64]| {
            let at = matvec(&QA, t);
            let d: Vec<f64> = (0..3).map(|i| t[i] - a[i] * at[i] - QC[i]).collect();
            0.5 * d.iter().zip(matvec(&QB, &d)).map(|(x, y)| x * y).sum::<f64>()
        };
        let (gt, ga, _) = quad_closed_form(&theta, &alpha);
        let h = 1e-6;
        for i in 0..3 {
            let (mut tp, mut tm) = (theta, theta);
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss(&tp, &alpha) - loss(&tm, &alpha)) / (2.0 * h);
            assert!((fd - gt[i]).abs() < 1e-7);
            let (mut ap, mut am) = (alpha, alpha);
            ap[i] += h;
            am[i] -= h;
            let fd = (loss(&theta, &ap) - loss(&theta, &am)) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn suspects_pick_the_common_op() {
        let s = |name: &str, ok: bool, ops: &[&'static str]| SuiteResult {
            name: name.into(),
            max_error: if ok { 0.0 } else { 1.0 },
            tolerance: 0.5,
            ops: ops.to_vec(),
            error: None,
            isolating: false,
        };
        let r = Report {
            suites: vec![s("a", false, &["mul", "tanh"]), s("b", true, &["mul"]), s("c", false, &["tanh", "sum"])],
        };
        assert_eq!(r.suspects(), vec!["tanh"]);
        assert!(r.render().contains("offending op: tanh"));
    }

    #[test]
    fn unknown_op_is_rejected() {
        assert_eq!(op_name("tanh").unwrap(), "tanh");
        assert_eq!(op_name("nope").unwrap_err().exit_code(), 1);
    }
}
