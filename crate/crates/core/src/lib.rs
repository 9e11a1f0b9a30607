//! Combinative matching for geometric shape assembly.

// `!(x > 0)` is the idiom for rejecting NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembler;
pub mod backbone;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod geom;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
