//! Cross-view object localization core.
//!
//! Given a query image with a clicked object and a reference image taken
//! from a very different viewpoint, the model predicts the object's
//! bounding box in the reference image. The pipeline is
//!
//! ```text
//! query (RGB + click) ─┐                                  ┌─ conf / box per anchor
//!                      ├─ backbone ─ cross-view fusion ─ gate ─ anchor head
//! reference (RGB) ─────┘
//! ```
//!
//! This crate is `no_std` + `alloc`: tensors, the reverse-mode tape, every
//! layer, the losses, metrics, training loop and the synthetic scene
//! renderer. File formats, image IO and the command line live in the
//! `crossloc` companion crate.

#![no_std]
#![deny(unsafe_code)]
// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
pub mod dataset;
pub mod detection;
pub mod encoding;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod mhsam;
pub mod model;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tol;
pub mod train;

pub use error::{Error, Result};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
