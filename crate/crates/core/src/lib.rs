//! Carve a blackbox classifier into a mixture of interpretable concept
//! experts and a residual network.
#![no_std]
// Numeric kernels index several parallel buffers per loop, and validation
// uses `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod carver;
pub mod concepts;
pub mod data;
pub mod elen;
pub mod error;
pub mod fol;
pub mod math;
pub mod numcore;
pub mod pipeline;
pub mod selector;
pub mod shortcut;

pub use error::{Error, Result};
