//! Differentiable image alignment.
//!
//! The crate provides, from the bottom up:
//!
//! - a dense `f64` tensor with hand-derived layer gradients ([`tensor`],
//!   [`layers`], [`optim`]),
//! - parameterized planar warps (affine and homography) with exact
//!   composition Jacobians ([`warp`]),
//! - a differentiable bilinear sampler over a canonical `[-1, 1]^2` frame
//!   ([`sampler`]),
//! - classical photometric alignment: Lucas-Kanade, its inverse-compositional
//!   variant, and cascaded linear regressors ([`classic`]),
//! - learned alignment networks: spatial transformers, their compositional
//!   variant, and recurrent inverse-compositional cascades ([`pipeline`],
//!   [`arch`]),
//! - data plumbing for the perturbed-image experiments ([`data`], [`synth`],
//!   [`checkpoint`]).
//!
//! Everything numeric is `f64` and every stochastic path takes an explicit
//! seeded RNG, so runs are reproducible bit for bit.

pub mod arch;
pub mod checkpoint;
pub mod classic;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
