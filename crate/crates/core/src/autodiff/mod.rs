//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to an append-only [`Tape`] and caches its
//! forward value. [`Tape::grad`] sweeps the tape backwards; with
//! `create_graph` set, every vector-Jacobian product is itself recorded as
//! ordinary forward nodes, so gradients can be differentiated again. This is
//! what makes meta-gradients through an inner update exact.
//!
//! A tape and its [`Var`]s are confined to one thread. Independent tapes can
//! be used in parallel.

mod backward;

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static VJP_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Flips the sign of every vector-Jacobian product of the named op on this
/// thread. Exists so gradient-check reports can be exercised against a known
/// broken build; pass `None` to restore.
#[doc(hidden)]
pub fn inject_vjp_fault(op: Option<&'static str>) {
    VJP_FAULT.with(|f| f.set(op));
}

pub(crate) fn vjp_fault() -> Option<&'static str> {
    VJP_FAULT.with(|f| f.get())
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    node: usize,
}

impl Var {
    pub fn node_id(&self) -> usize {
        self.node
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Square,
    Exp,
    Log,
    Relu,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    MatMul { ta: bool, tb: bool },
    AddBiasRow,
    SumRows,
    RepeatRows(usize),
    Sum,
    Mean,
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    Concat,
    Slice { start: usize, dims: Vec<usize> },
    Pad { start: usize, dims: Vec<usize> },
    LogSoftmax,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::MatMul { .. } => "matmul",
            Op::AddBiasRow => "add_bias_row",
            Op::SumRows => "sum_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::LogSoftmax => "log_softmax",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Append-only arena of recorded operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::DimMismatch {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Forward kernel for `op`. Shared by recording and [`Tape::replay`].
fn eval_op(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => unreachable!("leaves have no kernel"),
        Op::Add => {
            same_dims("add", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a + b)
        }
        Op::Sub => {
            same_dims("sub", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a - b)
        }
        Op::Mul => {
            same_dims("mul", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a * b)
        }
        Op::Div => {
            same_dims("div", x[0], x[1])?;
            x[0].zip_map(x[1], |a, b| a / b)
        }
        Op::Neg => x[0].map(|a| -a),
        Op::Scale(c) => {
            let c = *c;
            x[0].map(|a| a * c)
        }
        Op::Square => x[0].map(|a| a * a),
        Op::Exp => x[0].map(f64::exp),
        Op::Log => {
            if x[0].data().iter().any(|&v| v <= 0.0) {
                return Err(Error::LogDomain);
            }
            x[0].map(f64::ln)
        }
        Op::Relu => x[0].map(|a| if a > 0.0 { a } else { 0.0 }),
        Op::Tanh => x[0].map(f64::tanh),
        Op::Sigmoid => x[0].map(sigmoid),
        Op::Sin => x[0].map(f64::sin),
        Op::Cos => x[0].map(f64::cos),
        Op::MatMul { ta, tb } => Tensor::matmul(x[0], x[1], *ta, *tb)?,
        Op::AddBiasRow => Tensor::add_bias_row(x[0], x[1])?,
        Op::SumRows => Tensor::sum_rows(x[0])?,
        Op::RepeatRows(n) => Tensor::repeat_rows(x[0], *n)?,
        Op::Sum => Tensor::scalar(x[0].sum()),
        Op::Mean => {
            if x[0].is_empty() {
                return Err(Error::Empty("mean input"));
            }
            Tensor::scalar(x[0].sum() / x[0].len() as f64)
        }
        Op::Broadcast(dims) => {
            let v = x[0].item().ok_or_else(|| Error::DimMismatch {
                op: "broadcast",
                lhs: x[0].dims().to_vec(),
                rhs: dims.clone(),
            })?;
            Tensor::full(dims, v)
        }
        Op::Reshape(dims) => x[0].clone().reshaped(dims)?,
        Op::Concat => {
            let data: Vec<f64> = x.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::vector(data)
        }
        Op::Slice { start, dims } => {
            let len: usize = dims.iter().product();
            if start + len > x[0].len() {
                return Err(Error::DimMismatch {
                    op: "slice",
                    lhs: x[0].dims().to_vec(),
                    rhs: dims.clone(),
                });
            }
            Tensor::new(dims.clone(), x[0].data()[*start..start + len].to_vec())?
        }
        Op::Pad { start, dims } => {
            let mut out = Tensor::zeros(dims);
            if start + x[0].len() > out.len() {
                return Err(Error::DimMismatch {
                    op: "pad",
                    lhs: x[0].dims().to_vec(),
                    rhs: dims.clone(),
                });
            }
            out.data_mut()[*start..start + x[0].len()].copy_from_slice(x[0].data());
            out
        }
        Op::LogSoftmax => Tensor::log_softmax(x[0])?,
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(op.name().to_string()));
    }
    Ok(out)
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Drops every node. Vars recorded before the call become foreign.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
        self.grad_enabled = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the non-leaf ops recorded so far, sorted and deduplicated.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self
            .nodes
            .iter()
            .filter(|n| n.op != Op::Leaf)
            .map(|n| n.op.name())
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    /// Records a leaf. Non-finite values are rejected.
    pub fn var(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf value".into()));
        }
        Ok(self.push_leaf(value, requires_grad))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.var(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.node].value)
    }

    pub fn dims(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.dims())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.node].requires_grad)
    }

    /// Input node ids of `v`, in operand order.
    pub fn inputs(&self, v: Var) -> Result<&[usize]> {
        self.check(v)?;
        Ok(&self.nodes[v.node].inputs)
    }

    /// A new constant leaf holding the current value of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.push_leaf(value, false))
    }

    /// Recomputes every non-leaf value from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    eval_op(&node.op, &args)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.node >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            node: self.nodes.len() - 1,
        }
    }

    fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.node].value).collect();
            eval_op(&op, &args)?
        };
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.node].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.node).collect(),
            value,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            node: self.nodes.len() - 1,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }

    /// Multiplies by a constant that is not itself a graph node.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    /// `max(a, 0)`; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Cos, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { ta: false, tb: false }, &[a, b])
    }

    pub(crate) fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.apply(Op::MatMul { ta, tb }, &[a, b])
    }

    /// Adds a length-n vector to every row of a `[rows x n]` matrix.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Op::AddBiasRow, &[x, bias])
    }

    /// Column sums: `[rows x n] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumRows, &[x])
    }

    /// `[n] -> [rows x n]`.
    pub fn repeat_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        self.apply(Op::RepeatRows(rows), &[v])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    /// Fills a tensor of `dims` with the value of a one-element var.
    pub fn broadcast(&mut self, scalar: Var, dims: &[usize]) -> Result<Var> {
        self.apply(Op::Broadcast(dims.to_vec()), &[scalar])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(dims.to_vec()), &[a])
    }

    /// Flattens and concatenates, producing a rank-1 var.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat input"));
        }
        self.apply(Op::Concat, parts)
    }

    /// Contiguous flat range `[start, start + prod(dims))`, shaped as `dims`.
    pub fn slice(&mut self, a: Var, start: usize, dims: &[usize]) -> Result<Var> {
        self.apply(
            Op::Slice {
                start,
                dims: dims.to_vec(),
            },
            &[a],
        )
    }

    pub(crate) fn pad(&mut self, a: Var, start: usize, dims: &[usize]) -> Result<Var> {
        self.apply(
            Op::Pad {
                start,
                dims: dims.to_vec(),
            },
            &[a],
        )
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[logits])
    }

    /// Multiplies every element of `a` by the one-element var `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let dims = self.dims(a)?.to_vec();
        let b = self.broadcast(s, &dims)?;
        self.mul(a, b)
    }

    /// Mean squared difference against a fixed target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred)?;
        if p.dims() != target.dims() {
            return Err(mismatch("mse_loss", p, target));
        }
        let t = self.constant(target.clone())?;
        let d = self.sub(pred, t)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Mean over rows of `-log softmax(logits)[true class]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let l = self.value(logits)?;
        let (rows, _) = l
            .matrix_dims()
            .ok_or_else(|| mismatch("softmax_cross_entropy", l, labels))?;
        if l.dims() != labels.dims() {
            return Err(mismatch("softmax_cross_entropy", l, labels));
        }
        if rows == 0 {
            return Err(Error::Empty("softmax_cross_entropy batch"));
        }
        let cols = labels.dims()[1];
        for (r, row) in labels.data().chunks(cols.max(1)).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::NotOneHot(r));
            }
        }
        let y = self.constant(labels.clone())?;
        let ls = self.log_softmax(logits)?;
        let picked = self.mul(y, ls)?;
        let total = self.sum(picked)?;
        self.scale(total, -1.0 / rows as f64)
    }
}
