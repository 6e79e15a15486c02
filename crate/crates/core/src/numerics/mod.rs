//! Deterministic numeric substrate: tensors, linear algebra, direct 2-D
//! convolution, softmax, initializers, and a splittable seeded random stream.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    check_conv_geometry, conv2d_same, glorot_normal, gumbel_noise, matmul, softmax, softmax_slice,
    GUMBEL_UNIFORM_EPS,
};
pub(crate) use ops::{conv_output_at, dot_strided};
pub use rng::{RngStream, StreamLabel};
pub use tensor::Tensor;
