//! Region-routed convolutions with learned guidance and per-sample filters.
//!
//! A standard convolution applies one filter everywhere; a fully local
//! convolution pays for a separate filter at every pixel. This crate
//! implements the middle ground: a small bank of filters per layer, a
//! learned *guide* that assigns every output position to one bank slot, and
//! (optionally) a generator network that produces the bank from the sample
//! itself, so different inputs get different filters.
//!
//! The routing is a hard argmax — non-differentiable — so the backward pass
//! substitutes the softmax of the guide feature and propagates exact
//! gradients of that relaxation. The [`verify`] module checks every gradient
//! path against finite differences of an independently written forward.
//!
//! Module map:
//! * [`tensor`] — dense NHWC `f64` tensors, just enough operations;
//! * [`conv`] — standard / per-pixel / region-routed convolutions built on
//!   one shared kernel so their agreements are exact, not approximate;
//! * [`mask`] — guide convolution, argmax mask, softmax substitute;
//! * [`generator`] — per-sample filter banks from pooled summaries;
//! * [`layer`] — the assembled operator with its multi-path backward;
//! * [`cost`] — parameter and multiply-add accounting, verified by counting;
//! * [`verify`] — finite-difference oracles for every gradient path;
//! * [`train`] — a small deterministic trainer, datasets, checkpoints;
//! * [`agreement`] — mask-vs-ground-truth region agreement scoring.

pub mod agreement;
pub mod conv;
pub mod cost;
pub mod error;
pub mod generator;
pub mod layer;
pub mod mask;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

// Compile and run every code snippet in the guide (book/) as doctests, so
// the documentation cannot drift from the API it describes.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/convolutions.md")]
    mod convolutions {}
    #[doc = include_str!("../../../book/src/generator.md")]
    mod generator {}
    #[doc = include_str!("../../../book/src/backward.md")]
    mod backward {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    mod visualization {}
}
