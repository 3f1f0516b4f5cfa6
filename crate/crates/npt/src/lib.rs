//! Non-parametric transformer: a supervised model that takes an entire
//! dataset as input and lets attention move information both between the
//! attributes of a datapoint and between datapoints themselves.
//!
//! The crate is self-contained: a reverse-mode autodiff tensor engine,
//! the alternating between-datapoint / between-attribute attention stack,
//! the stochastic masking objective, a LAMB + Lookahead trainer, dataset
//! plumbing (CSV, splits, batching, semi-synthetic duplication tasks), and
//! analysis probes that test whether a trained model actually uses
//! datapoint interactions (corruption, deletion, row equivariance).

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod masking;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{NptError, Result};

/// Train/eval switch: stochastic pieces (dropout) are active only in Train.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}
