//! Core library for prototype-guided semi-supervised 3D segmentation.
//!
//! Everything here is pure computation over in-memory arrays: a small
//! reverse-mode autodiff engine, a 3-level volumetric encoder/decoder,
//! prototype cross-attention, pseudo-label rectification, voxel contrastive
//! supervision, the training step, and evaluation metrics. File formats,
//! config parsing, and the CLI live in the companion `protoseg` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); the default `std` and
//! `parallel` features enable the standard library and rayon-backed loops.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod cps;
pub mod crln;
pub mod dim;
pub mod err;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod sgd;
pub mod tensor;
pub mod trainer;
pub mod volume;

mod parallel;

pub use err::CoreError;
pub use tensor::{Scalar, Tensor};
