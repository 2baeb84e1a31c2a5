use super::{vjp_fault, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Gradients of the scalar `output` with respect to each of `inputs`.
    ///
    /// With `create_graph` the returned vars are differentiable nodes and may
    /// be fed back into `grad`. Without it they are constant leaves and the
    /// intermediate backward nodes are discarded. Inputs that `output` does
    /// not depend on (or that do not require grad) get an exact zero.
    pub fn grad(&mut self, output: Var, inputs: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check(output)?;
        for &v in inputs {
            self.check(v)?;
        }
        let out_dims = self.nodes[output.node].value.dims().to_vec();
        if self.nodes[output.node].value.len() != 1 {
            return Err(Error::NotScalar(out_dims));
        }

        let base_len = self.nodes.len();
        let saved = self.grad_enabled;
        self.grad_enabled = create_graph;
        let swept = self.sweep(output, inputs);
        self.grad_enabled = saved;
        let adjoints = swept?;

        if create_graph {
            return inputs
                .iter()
                .zip(adjoints)
                .map(|(&v, a)| match a {
                    Some(a) => Ok(a),
                    None => {
                        let dims = self.nodes[v.node].value.dims().to_vec();
                        self.constant(Tensor::zeros(&dims))
                    }
                })
                .collect();
        }

        let values: Vec<Tensor> = inputs
            .iter()
            .zip(&adjoints)
            .map(|(&v, a)| match a {
                Some(a) => self.nodes[a.node].value.clone(),
                None => Tensor::zeros(self.nodes[v.node].value.dims()),
            })
            .collect();
        self.nodes.truncate(base_len);
        Ok(values
            .into_iter()
            .map(|t| self.push_leaf(t, false))
            .collect())
    }

    fn sweep(&mut self, output: Var, inputs: &[Var]) -> Result<Vec<Option<Var>>> {
        let n = output.node + 1;
        let mut wanted = vec![false; n];
        for v in inputs {
            if v.node < n {
                wanted[v.node] = true;
            }
        }
        // A node is relevant when a requested input is among its ancestors.
        let mut relevant = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            relevant[i] = node.requires_grad
                && (wanted[i] || node.inputs.iter().any(|&j| relevant[j]));
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[output.node] {
            let dims = self.nodes[output.node].value.dims().to_vec();
            adj[output.node] = Some(self.push_leaf(Tensor::ones(&dims), false));
        }
        let fault = vjp_fault();

        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(up) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            if op == Op::Leaf {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let this = Var {
                tape: self.id,
                node: i,
            };
            let args: Vec<Var> = inputs
                .iter()
                .map(|&j| Var {
                    tape: self.id,
                    node: j,
                })
                .collect();
            for (k, &j) in inputs.iter().enumerate() {
                if !relevant[j] {
                    continue;
                }
                let mut contrib = self.vjp(&op, &args, k, this, up)?;
                if fault == Some(op.name()) {
                    contrib = self.neg(contrib)?;
                }
                adj[j] = Some(match adj[j] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(inputs.iter().map(|v| adj.get(v.node).copied().flatten()).collect())
    }

    /// Contribution of `up` (adjoint of `out`) to operand `k` of `op(args)`.
    fn vjp(&mut self, op: &Op, args: &[Var], k: usize, out: Var, up: Var) -> Result<Var> {
        let a = args[0];
        match op {
            Op::Leaf => unreachable!(),
            Op::Add => Ok(up),
            Op::Sub => {
                if k == 0 {
                    Ok(up)
                } else {
                    self.neg(up)
                }
            }
            Op::Mul => self.mul(up, args[1 - k]),
            Op::Div => {
                let b = args[1];
                if k == 0 {
                    self.div(up, b)
                } else {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(up, out)?;
                    let t = self.div(t, b)?;
                    self.neg(t)
                }
            }
            Op::Neg => self.neg(up),
            Op::Scale(c) => self.scale(up, *c),
            Op::Square => {
                let two_a = self.scale(a, 2.0)?;
                self.mul(up, two_a)
            }
            Op::Exp => self.mul(up, out),
            Op::Log => self.div(up, a),
            Op::Relu => {
                let mask = self.nodes[a.node]
                    .value
                    .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.push_leaf(mask, false);
                self.mul(up, mask)
            }
            Op::Tanh => {
                let dims = self.dims(out)?.to_vec();
                let one = self.push_leaf(Tensor::ones(&dims), false);
                let y2 = self.square(out)?;
                let d = self.sub(one, y2)?;
                self.mul(up, d)
            }
            Op::Sigmoid => {
                let dims = self.dims(out)?.to_vec();
                let one = self.push_leaf(Tensor::ones(&dims), false);
                let om = self.sub(one, out)?;
                let d = self.mul(out, om)?;
                self.mul(up, d)
            }
            Op::Sin => {
                let c = self.cos(a)?;
                self.mul(up, c)
            }
            Op::Cos => {
                let s = self.sin(a)?;
                let t = self.mul(up, s)?;
                self.neg(t)
            }
            Op::MatMul { ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let b = args[1];
                // out = op(a)·op(b)
                match (k, ta, tb) {
                    (0, false, _) => self.matmul_t(up, b, false, !tb),
                    (0, true, _) => self.matmul_t(b, up, tb, true),
                    (1, _, false) => self.matmul_t(a, up, !ta, false),
                    (1, _, true) => self.matmul_t(up, a, true, ta),
                    _ => unreachable!(),
                }
            }
            Op::AddBiasRow => {
                if k == 0 {
                    Ok(up)
                } else {
                    self.sum_rows(up)
                }
            }
            Op::SumRows => {
                let rows = self.dims(a)?[0];
                self.repeat_rows(up, rows)
            }
            Op::RepeatRows(_) => self.sum_rows(up),
            Op::Sum => {
                let dims = self.dims(a)?.to_vec();
                self.broadcast(up, &dims)
            }
            Op::Mean => {
                let dims = self.dims(a)?.to_vec();
                let n = self.nodes[a.node].value.len() as f64;
                let b = self.broadcast(up, &dims)?;
                self.scale(b, 1.0 / n)
            }
            Op::Broadcast(_) => {
                let dims = self.dims(a)?.to_vec();
                let s = self.sum(up)?;
                if dims.is_empty() {
                    Ok(s)
                } else {
                    self.reshape(s, &dims)
                }
            }
            Op::Reshape(_) => {
                let dims = self.dims(a)?.to_vec();
                self.reshape(up, &dims)
            }
            Op::Concat => {
                let start: usize = args[..k]
                    .iter()
                    .map(|v| self.nodes[v.node].value.len())
                    .sum();
                let dims = self.dims(args[k])?.to_vec();
                self.slice(up, start, &dims)
            }
            Op::Slice { start, .. } => {
                let dims = self.dims(a)?.to_vec();
                self.pad(up, *start, &dims)
            }
            Op::Pad { start, .. } => {
                let dims = self.dims(a)?.to_vec();
                self.slice(up, *start, &dims)
            }
            Op::LogSoftmax => {
                // d = up - softmax * rowsum(up)
                let (rows, cols) = self.nodes[a.node].value.matrix_dims().unwrap_or((0, 0));
                let ones_col = self.push_leaf(Tensor::ones(&[cols, 1]), false);
                let ones_row = self.push_leaf(Tensor::ones(&[1, cols]), false);
                let s = self.exp(out)?;
                let r = self.matmul(up, ones_col)?;
                let rb = self.matmul(r, ones_row)?;
                debug_assert_eq!(self.dims(rb)?, &[rows, cols]);
                let t = self.mul(s, rb)?;
                self.sub(up, t)
            }
        }
    }
}
