//! Inverse first-passage problems for one-dimensional diffusions.

// negated comparisons reject NaN on purpose; index loops mirror the stencils
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod grid;
pub mod hodograph;
pub mod inverse;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
