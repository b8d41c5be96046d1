//! Post-training mean-centered feature sparsification, end to end at desk
//! scale: a small tensor/autodiff engine, mini residual networks, per-channel
//! calibration, the sparsification operator itself, gradient-based attacks,
//! adversarial training loops and an experiment harness.
//!
//! The guide in `book/` walks through the concepts; start with
//! [`sparsifier`] for the core operator and [`harness`] for the experiment
//! protocol.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod prox;
pub mod sparsifier;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

// Keep the guide's code fences compiling: each chapter is mounted as a
// doc-test module, so `cargo test --doc` exercises every example in book/.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/operator.md")]
    mod operator {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/prox.md")]
    mod prox {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
