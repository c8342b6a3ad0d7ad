#![allow(clippy::single_range_in_vec_init, clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod backbone;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod meta;
pub mod numerics;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{EmtError, Result};
