//! Cell-based differentiable architecture search with partial channel sampling,
//! discrete-cell derivation and joint metric-learning retraining.

pub mod autodiff;
pub mod cell;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod genotype;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod retrain;
pub mod search;
pub mod search_space;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// The single RNG type used everywhere; its state is serializable for checkpoints.
pub type SeededRng = rand_chacha::ChaCha8Rng;
