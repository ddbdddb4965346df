//! Desk-scale lab for class-imbalanced semi-supervised learning.
//!
//! The crate builds every piece of the pipeline from scratch on top of a
//! small reverse-mode autodiff engine:
//!
//! * [`tensor`]: dense `f64` tensors, a recording [`tensor::Tape`] and a
//!   central finite-difference oracle.
//! * [`data`]: seeded long-tailed Gaussian-mixture datasets, weak/strong
//!   augmentation and minibatch sampling.
//! * [`model`]: the fully-connected classifier producing logits.
//! * [`ssl`]: FixMatch-style supervised/consistency losses, hard pseudo-labels,
//!   distribution alignment and sharpening.
//! * [`debias`]: baseline-logit refinement, the KL consistency loss, the
//!   gradient-conflict projection, training/inference loops and integrated
//!   gradients.
//! * [`metrics`]: confusion matrices, balanced accuracy, geometric mean.
//! * [`experiment`]: config parsing and the seeded experiment runner behind
//!   the `lcgc` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod data;
pub mod debias;
pub mod error;
pub mod experiment;
pub mod gradient;
pub mod metrics;
pub mod model;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use gradient::GradientVector;
pub use tensor::{Tape, Tensor, Var};
