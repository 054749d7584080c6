//! Core engine for online target-speaker voice activity detection.
//!
//! Everything in this crate is pure computation over in-memory buffers: the
//! tensor/autodiff kit, the two frame-embedding front-ends, the detection
//! back-end (single- and multi-channel), the block-wise streaming state
//! machine, the training step, and the diarization scorer. File and device
//! IO live in the companion `otsvad` crate.
//!
//! The crate is `no_std` (with `alloc`); the default `std` feature only adds
//! `std::error::Error` impls and faster libm-free float intrinsics.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod backend;
pub mod checkpoint;
pub mod error;
pub mod features;
mod fft;
pub mod frontend;
pub mod graph;
mod kernels;
pub mod model;
pub mod multichannel;
pub mod nn;
pub mod optim;
pub mod scoring;
pub mod streaming;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
