//! Thermal-to-visible face synthesis core.
//!
//! Everything here is pure computation over in-memory buffers: the cascaded
//! refinement generator ([`crn`]), the frozen perceptual network used as a
//! feature extractor ([`perceptual`]), the contextual loss and its analytic
//! gradient ([`cx`], [`loss`]), the training loop ([`train`]), identity-disjoint
//! fold planning ([`dataset`]) and the seven no-reference quality metrics
//! ([`quality`]).
//!
//! The crate is `no_std` with `alloc`. The default `std` feature only turns on
//! runtime SIMD detection in the matrix-multiply kernels.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod crn;
pub mod cx;
pub mod dataset;
pub mod digest;
mod error;
pub mod image;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod perceptual;
pub mod quality;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use scalar::Real;
pub use tensor::FeatureMap;
