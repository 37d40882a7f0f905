//! Attention-free vision transformer: patch embedding followed by
//! alternating feed-forward layers over the token and feature axes.
//!
//! The crate bundles everything needed to build, train, check and time the
//! architecture on a CPU:
//!
//! - [`tensor`]: row-major tensors and a tape-based reverse-mode autodiff engine.
//! - [`model`]: configs, parameter sets and the three block variants.
//! - [`data`]: IDX/CIFAR loaders, a synthetic dataset, batching and augmentation.
//! - [`train`]: AdamW, learning-rate schedule, training loop and checkpoints.
//! - [`bench`]: FLOP model and sequence-length scaling benchmark.
//! - [`cli`]: the `ffvit` command-line front end.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, ParameterSet, Preset, Variant};
pub use rng::TrainRng;
pub use tensor::{Scalar, Tape, Tensor, Var};
