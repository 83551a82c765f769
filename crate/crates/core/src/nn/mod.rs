//! Small reverse-mode engine for 3D volumes: convolution, max pooling,
//! transposed-convolution upsampling, ReLU, channel concatenation and
//! inverted dropout. Arrays are `[batch, channels, x, y, z]`, row-major.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod array;
mod conv;
mod dropout;
pub mod gradcheck;
mod ops;
mod rng;

pub use array::{Mat, NdArray, Param, Real, ShapeError};
pub use conv::{conv3d, conv3d_backward, conv_transpose3d, conv_transpose3d_backward, Conv3d, ConvTranspose3d};
pub use dropout::{dropout, dropout_backward, dropout_with_mask, DropoutConfig, DropoutMask, RateError, MAX_DROPOUT_RATE};
pub use ops::{concat_channels, maxpool3d, maxpool3d_backward, relu, relu_backward, split_channels};
pub use rng::{derive_seed, RngStream, MAX_SITES};
pub(crate) use ops::relu_inplace;
