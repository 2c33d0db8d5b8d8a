//! Evidential classification and uncertainty-driven active learning.
//!
//! The crate trains a small feedforward network whose output layer emits
//! non-negative class evidence. Evidence parameterizes a Dirichlet
//! distribution, which yields per-class belief masses and a single scalar
//! uncertainty. The active-learning controller repeatedly labels the pool
//! samples the model is least certain about.
//!
//! Module map:
//!
//! - [`numerics`]: log-gamma, digamma, trigamma, finite differences.
//! - [`evidential`]: opinions, the evidential loss and its gradient.
//! - [`network`]: encoder + heads, backprop, Adam, checkpoints.
//! - [`pipeline`]: contrastive pre-training, fine-tuning, distillation.
//! - [`active`]: the query / annotate / fine-tune / evaluate loop.
//! - [`metrics`]: accuracy, weighted F1, AUC, uncertainty histograms.
//! - [`datagen`]: synthetic Gaussian-mixture pools and their file format.

pub mod active;
pub mod datagen;
pub mod error;
pub mod evidential;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
