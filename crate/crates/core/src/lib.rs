// Validation uses `!(x > 0.0)` on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod io;
pub mod numerics;
pub mod pipeline;
pub mod ranking;
pub mod rqvae;
pub mod saviorenc;
pub mod synthgen;

pub use error::{Error, Result};
