//! Consistency-based semi-supervised learning on paired networks, with the
//! classic baselines, at desk scale.
//!
//! The crate trains two small MLPs whose agreement on unlabeled data acts as
//! the training signal: a latent consensus variable ties the networks
//! together, and integrating it out yields a weighted sum of supervised
//! cross-entropy and cross-network consistency terms (`not_loss`), plus a
//! label-prior-guided variant for scarce classes (`notga_loss`). Supervised,
//! pseudo-label, Mean Teacher, and virtual adversarial baselines share the
//! same trainer. Everything is deterministic given a seed: datasets, budget
//! sampling, init, batching, and augmentation each draw from their own named
//! RNG stream, and checkpoints capture enough state to make resumed runs
//! bit-identical.

// Guards like `!(v > 0.0)` are deliberate: unlike `v <= 0.0`, they also
// reject NaN, which every hyperparameter check here must do.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, NodeId, Tape, Tensor};
