//! Noise-robust deep multi-view clustering.
//!
//! Per-view autoencoders are trained with cross-view reconstruction, a
//! contrastive objective whose positive/negative pair weights come from a
//! soft reliability graph, attention-based imputation of missing views in
//! latent space, and distillation of per-view soft assignments towards
//! k-means targets on the fused latents.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: datasets, ingestion, synthetic fixtures and noise injection
//! - [`autodiff`]: a small reverse-mode tape over dense matrices
//! - [`nn`]: MLP autoencoders, cluster layers, Adam and checkpoints
//! - [`graph`], [`objectives`], [`imputation`]: the model's building blocks
//! - [`cluster`]: k-means and ACC/NMI/ARI
//! - [`train`]: training loop, evaluation and noise sweeps

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cluster;
pub mod data;
pub mod error;
pub mod graph;
pub mod imputation;
pub mod nn;
pub mod objectives;
pub mod train;

mod par;

pub use error::{Error, Result};
pub use par::is_parallel;
