//! Numeric kernels: forward evaluations and their vector-Jacobian products.
//!
//! Everything here is a pure function of its arguments. The autodiff
//! graph in [`crate::graph`] records which kernel ran and calls the
//! matching `*_backward` during reverse accumulation.

pub mod conv;
pub mod pointwise;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, ConvSpec, Padding};
pub use pointwise::{
    channel_mean, pixel_softmax2, pixel_softmax2_backward, sobel, sobel_backward, sobel_magnitude, SobelAxis,
};
pub use pool::{area_downsample, avg_pool2d_same, avg_pool2d_same_backward, max_pool2d, max_pool2d_backward};
pub use resample::{bilinear_resize, bilinear_resize_backward, nearest_resize};
