//! Heterogeneous few-shot segmentation at desk scale.
//!
//! The pipeline treats the support and query branches of a segmentation
//! episode as deliberately different ("heterogeneous") views of the same
//! category: they tap different backbone layers, carry branch-specific
//! aggregation, and are denoised by entropy-regularized optimal transport
//! before prompt-conditioned adapters fuse in textual evidence.
//!
//! Crate layout mirrors the pipeline:
//! - [`data`]: episodes, pseudo-mask normalization, synthetic datasets, disk IO
//! - [`backbone`]: 13-tap frozen feature extractor with a toy implementation
//! - [`ha`]: heterogeneous aggregation (projection, alignment, correlation)
//! - [`ht`]: attention + Sinkhorn transport denoising + pooled residuals
//! - [`hc`]: prompt bank, text-encoder stub, multimodal adapters
//! - [`head`]: segmentation decoder and the weighted BCE objective
//! - [`model`]: full-model assembly, parameter store, forward pass
//! - [`trainer`] / [`eval`] / [`ablation`]: episodic training and evaluation
//! - [`autodiff`]: the reverse-mode tape everything differentiable runs on

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ha;
pub mod head;
pub mod hc;
pub mod ht;
pub mod model;
pub mod optim;
pub mod runs;
pub mod trainer;
pub mod viz;
pub mod params;

pub use error::{Result, TlgError};
