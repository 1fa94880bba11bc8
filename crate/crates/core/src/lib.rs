//! Hybrid attention for autoregressive video diffusion, at desk scale.
//!
//! Each hybrid layer keeps the pretrained softmax attention for tokens of the
//! current frame and replaces attention to earlier frames with a fixed-size
//! gated-delta recurrent state. The crate carries the attention kernels, the
//! recurrence (sequential and chunkwise), a streaming denoising harness with
//! FLOP and byte accounting, a small reverse-mode gradient tape for
//! distillation, and the layer-selection arithmetic.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! wall-clock timing live in the `arl2` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod attention;
pub mod autodiff;
pub mod distill;
mod error;
pub mod gdn;
pub mod hybrid;
pub mod numerics;
pub mod selection;
pub mod streaming;

pub use error::{Error, Result};
pub use numerics::{Precision, Rng, Tensor};
