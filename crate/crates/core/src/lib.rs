//! Multi-frequency adaptive stereo matching.
//!
//! The crate is `no_std` + `alloc`; the default `std` feature only enables
//! runtime CPU feature detection in the matrix-multiply backend.
//!
//! Pipeline, left to right:
//!
//! * [`encoder`] extracts a weight-shared feature pyramid (1/4, 1/8, 1/16).
//! * [`cost_volume`] correlates quarter-resolution features group-wise.
//! * [`affa`] splits left features into radial frequency bands and emits
//!   complementary high/low attention maps.
//! * [`aahf`] weights the volume by those maps and fuses the two halves with
//!   low-rank (Linformer) self-attention.
//! * [`head`] regresses disparity with a soft argmax, upsamples it with learned
//!   convex weights and scores it with the two-scale smooth-L1 loss.
//!
//! Everything differentiable is built on the tape in [`graph`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod aahf;
pub mod affa;
pub mod cost_volume;
pub mod encoder;
mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod init;
mod math;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
