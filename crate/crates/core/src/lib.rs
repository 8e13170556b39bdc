//! Core algorithms for nighttime image de-raining and visible/infrared fusion.
//!
//! The crate is organized around a two-stage restoration pipeline:
//!
//! 1. A residual cleaning network ([`cleannet`]) removes rain degradation
//!    from low-light RGB images using attention-guided expert mixtures and
//!    transformer blocks with top-selection self-attention.
//! 2. A fusion stage ([`fusionnet`]) merges the cleaned luminance channel
//!    with an aligned infrared image, weighting each source by a measured
//!    information content, then iteratively refines contrast.
//!
//! Everything here is pure computation over owned buffers: no IO, no global
//! state, and deterministic given explicit seeds. The companion `rainfuse`
//! crate layers file formats, checkpoints, and the CLI on top.
//!
//! The crate is `no_std` (with `alloc`); float transcendentals come from
//! `libm` through `num-traits`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cleannet;
pub mod error;
pub mod fusionnet;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod rain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{ColorSpace, Image, ImagePair, Split};
pub use tensor::Tensor;

/// Scalar element trait shared by every numeric kernel.
///
/// Training runs at `f32`; gradient checks and metrics use `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + core::fmt::Debug + 'static
{
    /// Converts an `f64` literal or intermediate into `Self`.
    fn of_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }
    fn of_usize(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).expect("usize fits scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
