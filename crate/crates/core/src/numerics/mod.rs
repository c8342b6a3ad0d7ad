//! Deterministic numeric kernel: tensors, layer passes, loss, optimizer,
//! resampling and PSNR.

mod activation;
mod adam;
mod conv;
mod loss;
mod metrics;
mod resize;
mod shuffle;
mod tensor;

pub use activation::Activation;
pub use adam::{adam_step, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use loss::l1_loss;
pub use metrics::{mse, psnr, psnr_from_mse, PSNR_CAP_DB};
pub use resize::{bicubic_resize, ScaleFactor};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
pub use tensor::{Real, Tensor};
pub use tensor::ensure_same_shape;
