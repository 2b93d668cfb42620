//! Core machinery for self-supervised few-shot learning on vector data.
//!
//! The crate is `#![no_std]` and only needs `alloc`. It contains a small
//! reverse-mode autodiff engine, encoder stacks and the SGD optimizer, the
//! contrastive and distillation objectives, a synthetic data world with a
//! vector augmentation ladder, the correlated-Gaussian mutual information
//! benchmark, episodic N-way K-shot evaluation with a logistic-regression
//! probe, embedding spectrum diagnostics and the training loops tying them
//! together.
//!
//! File formats, CSV/SVG output, parallel runners and the command line live
//! in the companion `unisiam` crate. Enabling the `std` feature only turns on
//! runtime SIMD detection in the matrix multiplication backend.

#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod diagnostics;
mod error;
pub mod fewshot;
mod linalg;
pub mod losses;
pub mod math;
pub mod mi;
pub mod models;
pub mod rng;
mod tensor;
pub mod trainer;

pub use self::autodiff::{Graph, Var};
pub use self::error::{Error, Result};
pub use self::tensor::Tensor;
