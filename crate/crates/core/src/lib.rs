//! Robust active task sampling.
//!
//! A learner is trained on batches of tasks drawn from a parameterized task
//! family. Instead of sampling tasks uniformly, the samplers here score a
//! large pool of candidate tasks with a cheap latent-variable risk model and
//! keep a small, hard and diverse subset, which pushes the learner's tail
//! risk (CVaR) down without exact evaluation of every candidate.

pub mod acquisition;
pub mod bench_sinusoid;
pub mod bench_synthetic;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nnet;
pub mod risk_model;
pub mod rounds;
pub mod seed;
pub mod subset;
pub mod task_space;

pub use error::{RatsError, Result};
