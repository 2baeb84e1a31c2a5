//! Seeded random streams.
//!
//! Every run derives independent xoshiro256++ streams from one seed, one per
//! purpose, by long-jumping the base generator. Gaussian draws use the
//! Box–Muller transform so results do not depend on a sampling library's
//! internals.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Purposes that get their own stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Tasks,
    Rollouts,
    Eval,
    EvalRollouts,
    Other(u64),
}

impl Stream {
    fn index(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Tasks => 1,
            Stream::Rollouts => 2,
            Stream::Eval => 3,
            Stream::EvalRollouts => 4,
            Stream::Other(k) => 16 + k,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn stream(seed: u64, stream: Stream) -> Self {
        let mut inner = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..=stream.index() {
            inner.long_jump();
        }
        SeededRng { inner, spare: None }
    }

    /// A child stream, e.g. one per task index, derived from this one's
    /// next output.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.inner.random::<u64>())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box–Muller; the second value of each pair is kept
    /// for the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal(mean, std) rejected outside `mean ± bound * std`.
    pub fn truncated_normal(&mut self, mean: f64, std: f64, bound: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= bound {
                return mean + std * z;
            }
        }
    }
}
