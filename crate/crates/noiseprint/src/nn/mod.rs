//! Minimal neural-network engine: f32 tensors, same-padded convolution,
//! batch normalization, ReLU, bias-corrected ADAM, and a finite-difference
//! gradient checker. Backward passes are written out explicitly per layer;
//! there is no autodiff graph.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayer};
pub use gradcheck::{apply_probe_delta, grad_check, GradCheckReport};
pub use norm::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, relu_backward,
    relu_forward, BatchNorm, BnCache, BnGrads,
};
pub use tensor::Tensor;
