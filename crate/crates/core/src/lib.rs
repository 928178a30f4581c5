//! Binary ResNets trained with the real-to-binary recipe.
//!
//! The crate covers the full path from a real-valued teacher to a fully
//! binary student: bit-packed xnor-popcount convolution, a small tape-based
//! autograd with straight-through sign gradients, data-driven channel gating,
//! attention-matching and distillation losses, the staged teacher-student
//! pipeline, a trainer, and an operation counter.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autograd;
pub mod binconv;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod gating;
pub mod losses;
pub mod network;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// Runs the book's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/binary-convolution.md")]
    mod binary_convolution {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/progressive.md")]
    mod progressive {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
