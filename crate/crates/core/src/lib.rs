//! Core algorithms for ZRIGF: a two-stage multimodal dialogue model built on
//! a small reverse-mode autodiff engine.
//!
//! The crate is `no_std`-compatible (it requires `alloc`); all file IO, the
//! CLI, and on-disk formats live in the companion `zrigf` crate. Everything
//! here is deterministic given a seed: float math goes through `libm` so the
//! same bits come out regardless of platform or the `std` feature.
//!
//! Layout:
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors, the autodiff tape,
//!   and the finite-difference oracle used to verify it.
//! - [`nn`]: attention, transformer blocks, embeddings, 1x1 conv and
//!   pixel-shuffle.
//! - [`image`], [`tokenizer`], [`encoders`]: patch grids, the whitespace
//!   tokenizer and the two encoders with pooling/projection.
//! - [`contrastive`], [`generative`]: the stage-1 matching/reconstruction
//!   losses and the stage-2 fusion, gated decoding and beam search.
//! - [`retrieval`]: exact top-k cosine search over an image index.
//! - [`model`], [`optim`], [`pipeline`], [`synth`]: parameter bundle, AdamW,
//!   the two training stages, and the synthetic grounded corpus generator.
//! - [`metrics`], [`eval`]: BLEU-1 / ROUGE-L / embedding / distinct metrics,
//!   perplexity, and the ablation harness.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod config;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod generative;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use scalar::Scalar;
pub use tensor::Tensor;
