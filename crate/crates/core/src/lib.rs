//! Selective state-space (Mamba) encoder-decoder speech recognition,
//! built from scratch and trainable at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 tensors with tape-based reverse-mode autodiff
//! - [`ssm`]: the selective scan, its parallel form, and the Mamba block
//! - [`audio`]: WAV ingest, resampling, and the log-Mel frontend
//! - [`tokenizer`]: byte-level BPE with transcription special tokens
//! - [`model`]: the convolutional-stem encoder, cross-connected decoder,
//!   and greedy decoding
//! - [`training`]: AdamW, gradient clipping, the training loop, and
//!   checkpoints
//! - [`eval`]: word error rate and corpus evaluation
//! - [`synth`]: deterministic synthetic tone corpus generation
//! - [`bench`]: scan scaling measurements
//!
//! The `samba` binary exposes the full pipeline on the command line.

pub mod audio;
pub mod bench;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod numerics;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
