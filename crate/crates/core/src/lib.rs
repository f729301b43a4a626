//! Contextual biasing for a frozen sequence-to-sequence transducer.
//!
//! The crate is layered bottom-up:
//!
//! - [`rng`]: named deterministic random streams.
//! - [`tensor`]: dense row-major tensors generic over f32/f64, GEMM, softmax.
//! - [`graph`]: tape-based reverse-mode autodiff over those tensors.
//! - [`optim`]: Adam, learning-rate schedule, gradient clipping.
//! - [`gradcheck`]: finite-difference verification of the tape.
//! - [`vocab`]: static subword inventory and per-utterance dynamic vocabularies.
//! - [`datagen`]: synthetic lexicon, corpora, and feature synthesis.
//! - [`model`]: the frozen backbone and the trainable biasing adapters.
//! - [`train`]: pretraining and biasing-adapter training loops.
//! - [`decode`]: beam inference over the extended vocabulary.
//! - [`metrics`]: edit alignment, WER partitions, report assembly.
//! - [`pipeline`]: end-to-end experiment orchestration and reporting.

pub mod datagen;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
