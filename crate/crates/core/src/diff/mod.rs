//! Reverse-mode differentiation over 2-D arrays.

pub mod check;
pub mod checkpoint;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use check::{finite_difference_gradient, gradient_check, GradientReport};
pub use checkpoint::{Checkpoint, Dtype};
pub use ops::SparseRows;
pub use optim::{AdamW, AdamWConfig, AdamWState, CosineSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{evaluate, evaluate_with_gradients, Backward, BackwardCtx, GradAcc, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
