//! Base learners: fully connected networks, the Gaussian navigation policy,
//! and the shared / task-specific parameter split.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.01;
/// Truncation bound of the weight initializer, in standard deviations.
pub const INIT_TRUNCATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn on_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    fn on_tensor(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|a| if a > 0.0 { a } else { 0.0 }),
            Activation::Tanh => x.map(f64::tanh),
        }
    }
}

/// Layer widths from input to output; the activation applies to hidden
/// layers only.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 1-40-40-1 ReLU regressor.
    pub fn sine_regressor() -> Self {
        MlpSpec {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
        }
    }

    /// 2-100-100-2 ReLU network producing the policy mean.
    pub fn nav_policy() -> Self {
        MlpSpec {
            layer_sizes: vec![2, 100, 100, 2],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer sizes {:?} need at least two positive entries",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Ordered, uniquely named tensors. Flattening walks the entries in order,
/// each row-major; for networks that is layer order with each weight before
/// its bias.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParamSet::new();
        for (name, t) in entries {
            set.push(name, t)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Same names and dims as `self`, filled from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::BadShape {
                dims: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let part = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Ok((name.clone(), Tensor::new(t.dims().to_vec(), part)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { entries })
    }

    /// A set with the same names and dims, every entry filled with `v`.
    pub fn filled(&self, v: f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::full(t.dims(), v)))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.dims() == y.dims())
    }

    /// Registers every tensor as a leaf, in order.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors()
            .map(|t| tape.var(t.clone(), requires_grad))
            .collect()
    }

    /// Reads the current values of `vars` back into a set shaped like `self`.
    pub fn read_back(&self, tape: &Tape, vars: &[Var]) -> Result<ParamSet> {
        if vars.len() != self.len() {
            return Err(Error::Invalid(format!(
                "expected {} vars, got {}",
                self.len(),
                vars.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(vars)
            .map(|((n, _), &v)| Ok((n.clone(), tape.value(v)?.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { entries })
    }

    /// Entries of `self` followed by entries of `other`.
    pub fn concat(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (n, t) in &other.entries {
            out.push(n.clone(), t.clone())?;
        }
        Ok(out)
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_shape(other)
            && self
                .flatten()
                .iter()
                .zip(other.flatten())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Truncated-normal weights (±2σ, σ = 0.01) and zero biases. Entries are
/// named `w{i}` (`[in x out]`) and `b{i}` (`[out]`).
pub fn init_mlp(spec: &MlpSpec, rng: &mut SeededRng) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::new();
    for (i, pair) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.truncated_normal(0.0, INIT_STD, INIT_TRUNCATION))
            .collect();
        params.push(format!("w{i}"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        params.push(format!("b{i}"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(params)
}

fn check_params(spec: &MlpSpec, params: &[Var]) -> Result<()> {
    if params.len() < 2 * spec.layers() {
        return Err(Error::Invalid(format!(
            "network with {} layers needs {} parameter tensors, got {}",
            spec.layers(),
            2 * spec.layers(),
            params.len()
        )));
    }
    Ok(())
}

/// Affine + activation per hidden layer, affine output. `params` holds the
/// `w{i}, b{i}` pairs in order; extra trailing vars are ignored.
pub fn forward_mlp(tape: &mut Tape, spec: &MlpSpec, params: &[Var], x: Var) -> Result<Var> {
    check_params(spec, params)?;
    let xd = tape.dims(x)?;
    if xd.len() != 2 || xd[1] != spec.input_size() {
        return Err(Error::DimMismatch {
            op: "forward_mlp",
            lhs: xd.to_vec(),
            rhs: vec![spec.input_size()],
        });
    }
    let mut h = x;
    for layer in 0..spec.layers() {
        h = tape.matmul(h, params[2 * layer])?;
        h = tape.add_bias_row(h, params[2 * layer + 1])?;
        if layer + 1 < spec.layers() {
            h = spec.activation.on_tape(tape, h)?;
        }
    }
    Ok(h)
}

/// Tape-free forward pass with the same kernels as [`forward_mlp`].
pub fn forward_mlp_values(spec: &MlpSpec, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    if params.len() < 2 * spec.layers() {
        return Err(Error::Invalid("parameter set too short for network".into()));
    }
    if x.matrix_dims().map(|d| d.1) != Some(spec.input_size()) {
        return Err(Error::DimMismatch {
            op: "forward_mlp",
            lhs: x.dims().to_vec(),
            rhs: vec![spec.input_size()],
        });
    }
    let tensors: Vec<&Tensor> = params.tensors().collect();
    let mut h = x.clone();
    for layer in 0..spec.layers() {
        h = Tensor::matmul(&h, tensors[2 * layer], false, false)?;
        h = Tensor::add_bias_row(&h, tensors[2 * layer + 1])?;
        if layer + 1 < spec.layers() {
            h = spec.activation.on_tensor(&h);
        }
    }
    Ok(h)
}

/// Name of the policy's trainable log-variance entry.
pub const LOG_VAR: &str = "log_var";

/// Mean network plus a `log_var` 2-vector initialized at zero.
pub fn init_policy(spec: &MlpSpec, rng: &mut SeededRng) -> Result<ParamSet> {
    let mut params = init_mlp(spec, rng)?;
    params.push(LOG_VAR, Tensor::zeros(&[spec.output_size()]))?;
    Ok(params)
}

/// Mean `[batch x 2]` from the network and the shared log-variance var.
/// `params` is the mean network's pairs followed by `log_var`.
pub fn policy_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &[Var],
    state: Var,
) -> Result<(Var, Var)> {
    if params.len() != 2 * spec.layers() + 1 {
        return Err(Error::Invalid("policy parameters must end with log_var".into()));
    }
    let mean = forward_mlp(tape, spec, params, state)?;
    Ok((mean, params[2 * spec.layers()]))
}

/// Shared layers (θ₁) and task-specific layers (θ₂) of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeParamSet {
    pub shared: ParamSet,
    pub task_specific: ParamSet,
    pub split_layer: usize,
}

/// Layers `< split_layer` become shared; the rest, plus any trailing
/// non-layer entries, are task-specific.
pub fn split_params(full: &ParamSet, split_layer: usize) -> Result<CompositeParamSet> {
    let layer_entries = full.names().filter(|n| n.starts_with('w')).count();
    if split_layer > layer_entries {
        return Err(Error::Invalid(format!(
            "split layer {split_layer} out of range 0..={layer_entries}"
        )));
    }
    let cut = 2 * split_layer;
    let shared = ParamSet {
        entries: full.entries[..cut].to_vec(),
    };
    let task_specific = ParamSet {
        entries: full.entries[cut..].to_vec(),
    };
    Ok(CompositeParamSet {
        shared,
        task_specific,
        split_layer,
    })
}

pub fn join_params(composite: &CompositeParamSet) -> Result<ParamSet> {
    composite.shared.concat(&composite.task_specific)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;

    fn random_params(spec: &MlpSpec, seed: u64, scale: f64) -> ParamSet {
        let mut rng = SeededRng::new(seed);
        let mut p = init_mlp(spec, &mut rng).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.uniform(-scale, scale);
            }
        }
        p
    }

    /// Scalar-loop forward pass, independent of the matrix kernels.
    fn loop_forward(spec: &MlpSpec, params: &ParamSet, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let ts: Vec<&Tensor> = params.tensors().collect();
        xs.iter()
            .map(|x| {
                let mut h = x.clone();
                for layer in 0..spec.layers() {
                    let w = ts[2 * layer];
                    let b = ts[2 * layer + 1];
                    let (fi, fo) = w.matrix_dims().unwrap();
                    let mut next = vec![0.0; fo];
                    for (o, nv) in next.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..fi {
                            acc += h[i] * w.data()[i * fo + o];
                        }
                        *nv = acc + b.data()[o];
                        if layer + 1 < spec.layers() {
                            *nv = match spec.activation {
                                Activation::Relu => nv.max(0.0),
                                Activation::Tanh => nv.tanh(),
                            };
                        }
                    }
                    h = next;
                }
                h
            })
            .collect()
    }

    #[test]
    fn init_biases_zero_weights_bounded() {
        let spec = MlpSpec::sine_regressor();
        for seed in 0..20 {
            let p = init_mlp(&spec, &mut SeededRng::new(seed)).unwrap();
            for (name, t) in p.entries() {
                if name.starts_with('b') {
                    assert!(t.data().iter().all(|&v| v == 0.0));
                } else {
                    assert!(t.data().iter().all(|&v| (-0.02..=0.02).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::sine_regressor();
        let a = init_mlp(&spec, &mut SeededRng::new(5)).unwrap();
        let b = init_mlp(&spec, &mut SeededRng::new(5)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Tanh).is_ok());
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let mut p = init_mlp(&spec, &mut SeededRng::new(0)).unwrap().filled(0.0);
        p.entries[3].1 = Tensor::vector(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true).unwrap();
        let x = tape
            .constant(Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 4.0], &[0.0, 0.0]]).unwrap())
            .unwrap();
        let y = forward_mlp(&mut tape, &spec, &vars, x).unwrap();
        for row in tape.value(y).unwrap().data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let p = ParamSet::from_entries(vec![
            ("w0".into(), Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()),
            ("b0".into(), Tensor::zeros(&[2])),
        ])
        .unwrap();
        let x = Tensor::from_rows(&[&[-1.0, 2.5]]).unwrap();
        assert_eq!(forward_mlp_values(&spec, &p, &x).unwrap(), x);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let spec = MlpSpec::sine_regressor();
        let p = init_mlp(&spec, &mut SeededRng::new(0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true).unwrap();
        let x = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(forward_mlp(&mut tape, &spec, &vars, x).is_err());
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let spec = MlpSpec::sine_regressor();
        let p = random_params(&spec, 42, 0.5);
        let xs: Vec<Vec<f64>> = [-4.1, -0.3, 0.0, 1.7, 4.9].iter().map(|&v| vec![v]).collect();
        let expect = loop_forward(&spec, &p, &xs);
        let x = Tensor::new(vec![5, 1], xs.concat()).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, true).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = forward_mlp(&mut tape, &spec, &vars, xv).unwrap();
        let got = tape.value(y).unwrap();
        for (g, e) in got.data().iter().zip(expect.concat()) {
            assert!((g - e).abs() <= 1e-12);
        }
        assert_eq!(got, &forward_mlp_values(&spec, &p, &x).unwrap());
    }

    #[test]
    fn mlp_mse_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![2, 6, 5, 1], Activation::Relu).unwrap();
        let p = random_params(&spec, 9, 0.8);
        let x = Tensor::new(vec![4, 2], vec![0.3, -1.2, 0.8, 0.5, -0.4, 0.9, 1.5, -0.7]).unwrap();
        let y = Tensor::new(vec![4, 1], vec![0.2, -0.1, 0.7, 0.4]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let xv = tape.constant(x.clone())?;
            let out = forward_mlp(tape, &spec, v, xv)?;
            tape.mse_loss(out, &y)
        };
        let inputs: Vec<Tensor> = p.tensors().cloned().collect();
        assert!(gradcheck::check(&f, &inputs).unwrap() <= 1e-6);
    }

    #[test]
    fn policy_forward_shapes_and_init() {
        let spec = MlpSpec::nav_policy();
        let p = init_policy(&spec, &mut SeededRng::new(1)).unwrap();
        assert_eq!(p.get(LOG_VAR).unwrap(), &Tensor::zeros(&[2]));
        let std: Vec<f64> = p.get(LOG_VAR).unwrap().data().iter().map(|v| (0.5 * v).exp()).collect();
        assert_eq!(std, vec![1.0, 1.0]);

        let zero = p.filled(0.0);
        let mut tape = Tape::new();
        let vars = zero.register(&mut tape, true).unwrap();
        let s = tape.constant(Tensor::from_rows(&[&[0.1, 0.2], &[-0.3, 0.4]]).unwrap()).unwrap();
        let (mean, lv) = policy_forward(&mut tape, &spec, &vars, s).unwrap();
        assert_eq!(tape.value(mean).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(tape.dims(lv).unwrap(), &[2]);
    }

    #[test]
    fn policy_mean_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(vec![2, 7, 7, 2], Activation::Relu).unwrap();
        let mut rng = SeededRng::new(4);
        let p = {
            let mut p = init_policy(&spec, &mut rng).unwrap();
            for t in p.tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.uniform(-0.9, 0.9);
                }
            }
            p
        };
        let w0 = p.get("w0").unwrap().clone();
        let rest: Vec<Tensor> = p.tensors().skip(1).cloned().collect();
        let states = Tensor::from_rows(&[&[0.2, -0.3], &[0.5, 0.1]]).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let mut all = vec![v[0]];
            for t in &rest {
                all.push(tape.constant(t.clone())?);
            }
            let s = tape.constant(states.clone())?;
            let (mean, _) = policy_forward(tape, &spec, &all, s)?;
            let w = tape.constant(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]])?)?;
            let m = tape.mul(mean, w)?;
            tape.sum(m)
        };
        assert!(gradcheck::check(&f, &[w0]).unwrap() <= 1e-6);
    }

    #[test]
    fn split_examples() {
        let spec = MlpSpec::sine_regressor();
        let p = init_mlp(&spec, &mut SeededRng::new(2)).unwrap();
        let c0 = split_params(&p, 0).unwrap();
        assert!(c0.shared.is_empty());
        assert!(join_params(&c0).unwrap().bit_eq(&p));

        let c2 = split_params(&p, 2).unwrap();
        let names: Vec<&str> = c2.task_specific.names().collect();
        assert_eq!(names, vec!["w2", "b2"]);
        assert_eq!(c2.task_specific.get("w2"), p.get("w2"));
        assert_eq!(c2.shared.numel() + c2.task_specific.numel(), p.numel());

        let c3 = split_params(&p, 3).unwrap();
        assert!(c3.task_specific.is_empty());
        assert!(split_params(&p, 4).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.push("a", Tensor::scalar(2.0)).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_exact(seed in 0u64..1000, scale in 0.001f64..100.0) {
            let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh).unwrap();
            let p = random_params(&spec, seed, scale);
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert!(back.bit_eq(&p));
        }

        #[test]
        fn split_join_round_trip(split in 0usize..=3, seed in 0u64..100) {
            let spec = MlpSpec::sine_regressor();
            let p = random_params(&spec, seed, 1.0);
            let c = split_params(&p, split).unwrap();
            prop_assert!(join_params(&c).unwrap().bit_eq(&p));
        }
    }
}
