//! Registry of the efficient SR backbones (ESPCN, SRCNN, EDSR-1) with
//! forward and backward passes over a flat parameter vector.
//!
//! Flat layout: layers in graph order; within a layer the weights in
//! (out-channel, in-channel, kH, kW) order followed by that layer's biases.

mod arch;
mod model;

pub use arch::{ArchId, ArchSpec, ConvSpec, Node, IMAGE_CHANNELS};
pub use model::{
    backward_with, build_model, forward_trace_with, forward_with, resume_forward_with, ModelParams, Provenance,
    Trace,
};
