//! Meta-learners in the form of optimizers: Meta-SGD, MAML and an LSTM
//! learning-rate meta-learner, built on a reverse-mode autodiff tape that can
//! differentiate its own backward pass.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod metalearners;
pub mod models;
pub mod rl;
pub mod rng;
pub mod stats;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::{SeededRng, Stream};
pub use tensor::Tensor;
