//! Sample-adaptive inference for transformer classifiers.
//!
//! A transformer encoder is split after layer `K`: the first `K` layers
//! always run at full width, the remaining layers run at a width chosen per
//! input by a light-weight router. Sub-networks are leading-prefix slices of
//! the full weights, so every width shares one set of parameters. The router
//! is trained on hardness labels derived from the network's own confidence
//! history during training.
//!
//! Crate layout:
//!
//! - [`numerics`]: dense tensors and a reverse-mode autodiff tape.
//! - [`encoder`]: the prefix-sliceable transformer and its parameters.
//! - [`hardness`]: confidence histories and hardness labels.
//! - [`router`]: the hardness predictor and argmax routing.
//! - [`training`]: the training loop, AdamW, head reordering, evaluation.
//! - [`flops`]: static multiply-accumulate accounting.
//! - [`data`]: datasets, the synthetic hardness task, and sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod hardness;
pub mod model;
pub mod numerics;
pub mod router;
pub mod training;

pub use error::{Error, Result};
