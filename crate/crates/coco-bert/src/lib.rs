//! Cooperative contrastive pre-training for paired video/sentence data,
//! implemented end to end on a small self-contained f64 autodiff engine.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`]: dense tensors + reverse-mode tape + gradient checking
//! - [`nn`]: embeddings, multi-head attention, transformer blocks, pooler
//! - [`encoder`]: query/key (momentum) encoder pairs per modality
//! - [`loss`]: key memories, InfoNCE, the cross-modal (Co-IM) and
//!   intra-modal denoising (Co-ID) objectives, and the binary matching head
//! - [`decoder`]: cross-modal decoder with masked-token and generative heads
//! - [`data`]: masking, synthetic planted-correlation corpora, JSONL I/O
//! - [`train`]: Adam, the pre-training step/loop, metrics
//! - [`checkpoint`]: binary named-tensor snapshots
//! - [`downstream`]: retrieval, question answering, caption evaluation
//! - [`cli`]: config files, presets, and the `coco` binary's commands
//!
//! The `examples/` directory contains one runnable walkthrough per
//! capability; `tests/acceptance.rs` is the release gate.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CocoError, Result};
pub use tensor::{grad_check, Tape, Tensor, Var};
