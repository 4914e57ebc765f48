//! Core math for facial-expression classifiers whose spatial attention is
//! steered toward facial action units.
//!
//! The crate covers the numerical pipeline that everything else is built on:
//!
//! * [`codebook`]: expression labels, action-unit records, and validation of
//!   an expression-to-AU codebook.
//! * [`landmarks`]: 68-point landmark sets, anchor-point resolution,
//!   interocular distance, mirroring, and the text exchange format.
//! * [`aumap`]: rasterization of landmark anchors into Gaussian action-unit
//!   heatmaps, plus bilinear map resizing.
//! * [`align`]: per-layer attention maps (channel means), cosine similarity,
//!   and the composite classification + alignment loss with analytic
//!   gradients.
//! * [`cams`]: class activation map formulas (weight-based CAM, gradient
//!   CAM, the second-order variant, and elementwise layer CAM).
//!
//! All arithmetic is `f64`. The crate is `no_std`-compatible (it requires
//! `alloc`); the default `std` feature only switches error types onto
//! `std::error::Error` via the `core` trait and is otherwise inert.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod align;
pub mod aumap;
pub mod cams;
pub mod codebook;
pub mod landmarks;
pub mod map;

pub use align::{AttentionMap, FeatureStack, LossBreakdown};
pub use aumap::{AuHeatmap, AuMapParams};
pub use codebook::{Anchor, AuSpec, Codebook, Expression, Laterality};
pub use landmarks::LandmarkSet;
pub use map::Map2;

/// `exp` routed through `libm` so results are identical with and without
/// `std`.
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

/// `sqrt` routed through `libm` for the same reason as [`exp`].
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}
