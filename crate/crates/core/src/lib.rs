//! Numerical kernels for spatio-temporal deformable attention over clip-level
//! feature maps.
//!
//! The crate is `no_std` (it needs `alloc`) and has no IO. It provides:
//!
//! - [`tensor`]: a small dense-array substrate, clip feature maps and seeded RNG.
//! - [`interp`]: trilinear sampling of a feature map at fractional points, with
//!   gradients with respect to both the grid and the point.
//! - [`dense`]: reference multi-head attention with a hand-written backward pass.
//! - [`deform`]: spatio-temporal deformable attention (offset and weight heads,
//!   K-point sparse sampling), its backward pass and the dense-equivalence
//!   construction.
//! - [`blocks`]: toy encoder/decoder layers, 3-d sinusoidal positional encoding.
//! - [`complexity`]: exact multiply/add accounting and log-log scaling fits.
//! - [`gradcheck`]: central finite-difference oracle for every backward pass.
//! - [`monitor`]: running worst-case softmax normalization error.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod blocks;
pub mod complexity;
pub mod deform;
pub mod dense;
mod error;
pub mod gradcheck;
pub mod interp;
mod linalg;
pub mod monitor;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::{ClipFeatureMap, GridDims, RngSeed, SeededRng, Tensor};
