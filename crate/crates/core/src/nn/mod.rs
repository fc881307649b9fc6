//! Differentiable building blocks with explicit forward caches and
//! hand-written backward passes.
//!
//! Every parameterised layer accumulates its gradients into a value of its
//! own type (`grad: &mut Self`), so a zeroed clone of a model doubles as its
//! gradient buffer.

mod activation;
mod conv;
mod init;
mod linear;
mod norm;
mod params;
mod resample;

pub use activation::{gelu, gelu_backward, relu, relu_backward, sigmoid};
pub use conv::{Conv2d, ConvCache};
pub use init::{trunc_normal, trunc_normal_array};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BatchNormCache, BatchStats, LayerNorm, LayerNormCache};
pub use params::{join, param_count, params_to_vec, zero_params, zeroed_like, Parameterized};
pub use resample::{
    cubic_resize_matrix, linear_resize_matrix, resample_chw, resample_hwc, Resampler,
};
