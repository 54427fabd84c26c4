//! Student–teacher–expert variational multimodal distillation.
//!
//! A student network learns to classify from raw features alone while, during
//! training only, a teacher (fed annotation-masked features) and an expert
//! (fed report embeddings) shape its latent space through variational KL
//! terms and a label-supervised contrastive objective.
//!
//! Module map:
//! - [`tensor`]: dense tensors and the reverse-mode autodiff tape.
//! - [`networks`]: encoders, variational heads, the shared classifier, checkpoints.
//! - [`losses`]: every term of the training objective.
//! - [`synthdata`]: synthetic multimodal data, splits, JSON Lines I/O.
//! - [`train`]: the training loop and Adam.
//! - [`eval`]: student-only inference, metrics, the ablation harness.
//! - [`cli`]: the `vmd` command-line tool.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod parallel;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use tensor::{Graph, Tensor, Var};
