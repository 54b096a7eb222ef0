//! Domain-adversarial training of a multi-speaker convolutional
//! sequence-to-sequence synthesizer, at desk scale.
//!
//! The text encoder's output is routed through a gradient reversal layer
//! into an angular-margin softmax speaker classifier, so that training pushes
//! speaker identity out of the text embedding and into the speaker embedding.
//! Disentanglement is measured with a freshly trained probe classifier and
//! attention-alignment diagnostics.
//!
//! Module map:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over `f64` tensors
//! - [`nnblocks`]: gradient reversal, conditioned convolutions, attention, losses
//! - [`model`]: encoder, decoder, adversarial classifier
//! - [`synthdata`]: deterministic synthetic multi-speaker corpus
//! - [`trainopt`]: Adam with Noam schedule, clipping, training loop, checkpoints
//! - [`evalprobe`]: probe classifier and alignment reports
//! - [`cli`]: the `advtts` command line

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evalprobe;
pub mod kv;
pub mod model;
pub mod nnblocks;
pub mod rng;
pub mod synthdata;
pub mod trainopt;

pub use error::{Error, Result};
