//! Core of the multi-interactive Siamese decoder for RGB-thermal salient
//! object detection.
//!
//! Everything here is pure computation over in-memory tensors and builds
//! without `std` (with `alloc`): the tensor engine and its reverse-mode
//! differentiation, the dual-stream encoder, global information module,
//! Siamese decoder, the training objective, noisy-modality augmentation, the
//! SGD optimiser and the saliency evaluation metrics. File formats, datasets
//! and the command line live in the `siamdec` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod autograd;
pub mod blocks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gim;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Shape, Tensor};
