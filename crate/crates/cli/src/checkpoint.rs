//! Binary checkpoints: named f64 arrays.
//!
//! Layout, all little-endian: `MSGDCKPT`, u32 version, u32 array count, then
//! per array a u16 name length, the UTF-8 name, a u8 rank, rank u64 dims and
//! the f64 values.

use std::io::Write;
use std::path::Path;

use metasgd::metalearners::{LrLstmState, MamlState, MetaSgdState, MetaState};
use metasgd::models::{Activation, MlpSpec, ParamSet};
use metasgd::tasks::SineTaskConfig;
use metasgd::train::{AdamState, OuterOptimizer, Trainer};
use metasgd::Tensor;

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"MSGDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Validation(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor, CliError> {
        self.get(name).ok_or_else(|| corrupt(format!("missing array `{name}`")))
    }

    /// Entries whose names start with `prefix.`, prefix stripped.
    fn group(&self, prefix: &str) -> Result<ParamSet, CliError> {
        let p = format!("{prefix}.");
        let entries = self
            .arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect();
        Ok(ParamSet::from_entries(entries)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CliError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.arrays.len()).map_err(|_| corrupt("too many arrays"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.arrays {
            let len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.dims().len()).map_err(|_| corrupt(format!("rank too high: {name}")))?;
            out.push(rank);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic bytes; unsupported version or not a checkpoint"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("array name is not UTF-8"))?
                .to_string();
            if arrays.iter().any(|(n, _)| n == &name) {
                return Err(corrupt(format!("duplicate array `{name}`")));
            }
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array()?);
                dims.push(usize::try_from(d).map_err(|_| corrupt(format!("`{name}`: dim too large")))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| corrupt(format!("`{name}`: truncated values")))?;
            let data = (0..n)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(dims, data).map_err(|e| corrupt(format!("`{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if n > self.remaining() {
            return Err(corrupt("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CliError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Writes to a temporary file in the target directory, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    write_atomic(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}

/// Everything a checkpoint holds besides the meta-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub spec: MlpSpec,
    pub sine: SineTaskConfig,
    pub config_sha256: [u8; 32],
}

fn scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v])
}

fn as_count(t: &Tensor, name: &str) -> Result<usize, CliError> {
    let v = t.data().first().copied().unwrap_or(f64::NAN);
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(corrupt(format!("`{name}` is not a count")))
    }
}

fn values<const N: usize>(ckpt: &Checkpoint, name: &str) -> Result<[f64; N], CliError> {
    ckpt.require(name)?
        .data()
        .try_into()
        .map_err(|_| corrupt(format!("`{name}` must hold {N} values")))
}

/// Trainer plus run metadata as named arrays.
pub fn from_trainer(trainer: &Trainer, meta: &RunMeta) -> Result<Checkpoint, CliError> {
    let mut arrays = Vec::new();
    let mut push = |name: &str, t: Tensor| arrays.push((name.to_string(), t));
    let (kind, hparams) = match &trainer.state {
        MetaState::MetaSgd(s) => (0.0, vec![f64::from(u8::from(s.learn_alpha))]),
        MetaState::Maml(s) => (1.0, vec![s.alpha, s.inner_steps as f64]),
        MetaState::LrLstm(s) => (2.0, vec![s.beta, s.hidden as f64, s.steps as f64]),
    };
    push("meta.kind", scalar(kind));
    push("meta.iteration", scalar(trainer.iteration as f64));
    push(
        "meta.config_sha256",
        Tensor::vector(meta.config_sha256.iter().map(|&b| f64::from(b)).collect()),
    );
    push(
        "meta.layers",
        Tensor::vector(meta.spec.layer_sizes.iter().map(|&s| s as f64).collect()),
    );
    push(
        "meta.activation",
        scalar(match meta.spec.activation {
            Activation::Relu => 0.0,
            Activation::Tanh => 1.0,
        }),
    );
    push("meta.hparams", Tensor::vector(hparams));
    let s = &meta.sine;
    push(
        "meta.sine",
        Tensor::vector(vec![
            s.amplitude.0,
            s.amplitude.1,
            s.frequency.0,
            s.frequency.1,
            s.phase.0,
            s.phase.1,
            s.input_range.0,
            s.input_range.1,
            s.shots as f64,
            s.test_size as f64,
        ]),
    );
    for (name, t) in trainer.state.arrays().entries() {
        push(name, t.clone());
    }
    match &trainer.optimizer {
        OuterOptimizer::Sgd => push("meta.optimizer", scalar(1.0)),
        OuterOptimizer::Adam(a) => {
            push("meta.optimizer", scalar(0.0));
            push("adam.step", scalar(a.step as f64));
            let trainable = trainer.state.trainable();
            for (name, m) in trainable.names().zip(&a.m) {
                push(&format!("adam.m.{name}"), m.clone());
            }
            for (name, v) in trainable.names().zip(&a.v) {
                push(&format!("adam.v.{name}"), v.clone());
            }
        }
    }
    Ok(Checkpoint { arrays })
}

/// Inverse of [`from_trainer`].
pub fn to_trainer(ckpt: &Checkpoint) -> Result<(Trainer, RunMeta), CliError> {
    let kind = as_count(ckpt.require("meta.kind")?, "meta.kind")?;
    let iteration = as_count(ckpt.require("meta.iteration")?, "meta.iteration")?;
    let digest_vals = ckpt.require("meta.config_sha256")?.data();
    if digest_vals.len() != 32 {
        return Err(corrupt("`meta.config_sha256` must hold 32 bytes"));
    }
    let mut config_sha256 = [0u8; 32];
    for (b, &v) in config_sha256.iter_mut().zip(digest_vals) {
        *b = u8::try_from(as_count(&scalar(v), "meta.config_sha256")?)
            .map_err(|_| corrupt("`meta.config_sha256` byte out of range"))?;
    }
    let layers = ckpt
        .require("meta.layers")?
        .data()
        .iter()
        .map(|&v| as_count(&scalar(v), "meta.layers"))
        .collect::<Result<Vec<_>, _>>()?;
    let activation = match as_count(ckpt.require("meta.activation")?, "meta.activation")? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        k => return Err(corrupt(format!("unknown activation code {k}"))),
    };
    let spec = MlpSpec::new(layers, activation)?;
    let s: [f64; 10] = values(ckpt, "meta.sine")?;
    let sine = SineTaskConfig {
        amplitude: (s[0], s[1]),
        frequency: (s[2], s[3]),
        phase: (s[4], s[5]),
        input_range: (s[6], s[7]),
        shots: as_count(&scalar(s[8]), "meta.sine")?,
        test_size: as_count(&scalar(s[9]), "meta.sine")?,
    };

    let state = match kind {
        0 => {
            let [learn] = values::<1>(ckpt, "meta.hparams")?;
            let theta = ckpt.group("theta")?;
            let alpha = ckpt.group("alpha")?;
            if !theta.same_shape(&alpha) {
                return Err(corrupt("theta and alpha arrays disagree"));
            }
            MetaState::MetaSgd(MetaSgdState {
                theta,
                alpha,
                learn_alpha: learn != 0.0,
            })
        }
        1 => {
            let [alpha, steps] = values::<2>(ckpt, "meta.hparams")?;
            let steps = as_count(&scalar(steps), "meta.hparams")?;
            MetaState::Maml(MamlState::new(ckpt.group("theta")?, alpha, steps)?)
        }
        2 => {
            let [beta, hidden, steps] = values::<3>(ckpt, "meta.hparams")?;
            MetaState::LrLstm(LrLstmState {
                phi: ckpt.group("phi")?,
                beta,
                theta1: ckpt.group("theta1")?,
                theta2_init: ckpt.group("theta2")?,
                steps: as_count(&scalar(steps), "meta.hparams")?,
                hidden: as_count(&scalar(hidden), "meta.hparams")?,
            })
        }
        k => return Err(corrupt(format!("unknown meta-learner code {k}"))),
    };
    let learner = state.initial_learner()?;
    let expected = 2 * spec.layers() + usize::from(learner.get("log_var").is_some());
    if learner.len() != expected {
        return Err(corrupt("learner arrays do not match the recorded layer sizes"));
    }
    for i in 0..spec.layers() {
        let w = learner.get(&format!("w{i}")).map(|t| t.dims().to_vec());
        if w != Some(vec![spec.layer_sizes[i], spec.layer_sizes[i + 1]]) {
            return Err(corrupt(format!("array w{i} does not match the recorded layer sizes")));
        }
    }

    let trainable = state.trainable();
    let optimizer = match as_count(ckpt.require("meta.optimizer")?, "meta.optimizer")? {
        1 => OuterOptimizer::Sgd,
        0 => {
            let mut adam = AdamState::new(&trainable);
            adam.step = as_count(ckpt.require("adam.step")?, "adam.step")? as u64;
            for (i, (name, t)) in trainable.entries().iter().enumerate() {
                for (which, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                    let key = format!("adam.{which}.{name}");
                    let saved = ckpt.require(&key)?;
                    if saved.dims() != t.dims() {
                        return Err(corrupt(format!("`{key}` dims do not match its parameter")));
                    }
                    *slot = saved.clone();
                }
            }
            OuterOptimizer::Adam(adam)
        }
        k => return Err(corrupt(format!("unknown optimizer code {k}"))),
    };
    let trainer = Trainer {
        state,
        optimizer,
        iteration,
    };
    Ok((trainer, RunMeta { spec, sine, config_sha256 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use metasgd::models::init_mlp;
    use metasgd::train::{init_meta_state, MetaInitConfig, MetaLearnerKind, OptimizerKind};
    use metasgd::SeededRng;
    use proptest::prelude::*;

    fn meta(spec: MlpSpec) -> RunMeta {
        RunMeta {
            spec,
            sine: SineTaskConfig::default(),
            config_sha256: [7; 32],
        }
    }

    fn trainer(kind: MetaLearnerKind, opt: OptimizerKind) -> Trainer {
        let spec = MlpSpec::new(vec![1, 4, 3, 1], Activation::Relu).unwrap();
        let mut rng = SeededRng::new(5);
        let theta = init_mlp(&spec, &mut rng).unwrap();
        let cfg = MetaInitConfig {
            lstm: metasgd::train::LrLstmConfig {
                hidden: 3,
                split_layer: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let state = init_meta_state(kind, theta, &cfg, &mut rng).unwrap();
        let mut t = Trainer::new(state, opt);
        if let OuterOptimizer::Adam(a) = &mut t.optimizer {
            a.step = 3;
            for m in &mut a.m {
                for v in m.data_mut() {
                    *v = rng.normal();
                }
            }
        }
        t.iteration = 3;
        t
    }

    #[test]
    fn trainer_round_trips_bitwise() {
        for kind in [MetaLearnerKind::MetaSgd, MetaLearnerKind::Maml, MetaLearnerKind::LrLstm] {
            for opt in [OptimizerKind::Adam, OptimizerKind::Sgd] {
                let t = trainer(kind, opt);
                let spec = MlpSpec::new(vec![1, 4, 3, 1], Activation::Relu).unwrap();
                let ckpt = from_trainer(&t, &meta(spec.clone())).unwrap();
                let bytes = ckpt.encode().unwrap();
                let back = Checkpoint::decode(&bytes).unwrap();
                assert_eq!(back.encode().unwrap(), bytes);
                let (t2, m2) = to_trainer(&back).unwrap();
                assert_eq!(t2, t);
                assert_eq!(m2, meta(spec));
            }
        }
    }

    #[test]
    fn frozen_alpha_survives() {
        let spec = MlpSpec::new(vec![1, 2, 1], Activation::Tanh).unwrap();
        let theta = init_mlp(&spec, &mut SeededRng::new(0)).unwrap();
        let t = Trainer::new(
            MetaState::MetaSgd(MetaSgdState::with_frozen_alpha(theta, 0.01)),
            OptimizerKind::Adam,
        );
        let ckpt = from_trainer(&t, &meta(spec)).unwrap();
        let (t2, _) = to_trainer(&Checkpoint::decode(&ckpt.encode().unwrap()).unwrap()).unwrap();
        assert_eq!(t2, t);
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let bytes = Checkpoint::default().encode().unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[12..], &[0, 0, 0, 0]);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), Checkpoint::default());
    }

    #[test]
    fn byte_layout() {
        let ckpt = Checkpoint {
            arrays: vec![("ab".into(), Tensor::new(vec![2], vec![1.0, -0.5]).unwrap())],
        };
        let b = ckpt.encode().unwrap();
        let mut expect = b"MSGDCKPT".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 1]);
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut b = Checkpoint::default().encode().unwrap();
        b[0] = b'X';
        let err = Checkpoint::decode(&b).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut b = Checkpoint::default().encode().unwrap();
        b[8] = 2;
        assert!(Checkpoint::decode(&b).unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn truncation_is_rejected() {
        let t = trainer(MetaLearnerKind::MetaSgd, OptimizerKind::Adam);
        let spec = MlpSpec::new(vec![1, 4, 3, 1], Activation::Relu).unwrap();
        let b = from_trainer(&t, &meta(spec)).unwrap().encode().unwrap();
        for cut in [4, 12, 17, 40, b.len() - 1] {
            assert!(Checkpoint::decode(&b[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn dim_inconsistency_is_rejected() {
        let t = trainer(MetaLearnerKind::Maml, OptimizerKind::Adam);
        let spec = MlpSpec::new(vec![1, 4, 3, 1], Activation::Relu).unwrap();
        let mut ckpt = from_trainer(&t, &meta(spec)).unwrap();
        let slot = ckpt.arrays.iter_mut().find(|(n, _)| n == "adam.v.theta.w1").unwrap();
        slot.1 = Tensor::zeros(&[3, 4]);
        assert!(to_trainer(&ckpt).is_err());
        let mut ckpt2 = from_trainer(&t, &meta(MlpSpec::new(vec![1, 5, 3, 1], Activation::Relu).unwrap())).unwrap();
        assert!(to_trainer(&ckpt2).is_err());
        ckpt2.arrays.retain(|(n, _)| n != "meta.kind");
        assert!(to_trainer(&ckpt2).unwrap_err().to_string().contains("meta.kind"));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let ckpt = Checkpoint {
            arrays: vec![("x".into(), Tensor::scalar(f64::NAN))],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.arrays[0].1.data()[0].is_nan());
        assert_eq!(back.arrays[0].1.dims(), &[] as &[usize]);
        assert_eq!(load_checkpoint(&dir.path().join("nope")).unwrap_err().exit_code(), 3);
    }

    proptest! {
        #[test]
        fn arbitrary_arrays_round_trip(
            raw in prop::collection::vec(
                (prop::collection::vec(0usize..4, 0..4), prop::collection::vec(any::<u64>(), 0..64)),
                0..6,
            )
        ) {
            let mut arrays = Vec::new();
            for (i, (dims, bits)) in raw.into_iter().enumerate() {
                let n: usize = dims.iter().product();
                let data: Vec<f64> = (0..n).map(|k| f64::from_bits(bits.get(k).copied().unwrap_or(k as u64))).collect();
                arrays.push((format!("a{i}"), Tensor::new(dims, data).unwrap()));
            }
            let ckpt = Checkpoint { arrays };
            let bytes = ckpt.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
        }
    }
}
