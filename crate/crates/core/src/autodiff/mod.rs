//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod check;
mod graph;

pub use self::check::grad_check;
pub use self::graph::{BatchNormMode, BatchStats, Graph, Var};

#[cfg(test)]
mod tests;
