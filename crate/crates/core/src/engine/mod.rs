//! Layer kernels with forward and backward passes.

pub mod dense;
pub mod image;
pub mod linalg;
pub mod mesh;
pub mod norm;
pub mod tensor;

pub use dense::{
    dense_backward, dense_forward, relu_backward, relu_forward, sgd_step, softmax, softmax_cross_entropy,
    DenseGrads, DenseWeights,
};
pub use image::{
    conv2d_backward, conv2d_forward, mean_pool2d_backward, mean_pool2d_forward, out_extent, Conv2dGeometry,
    Conv2dGrads, Conv2dWeights,
};
pub use mesh::{
    mesh_conv_backward, mesh_conv_forward, mesh_mean_pool_backward, mesh_mean_pool_forward, ConvGrads, ConvWeights,
};
pub use norm::{batch_norm_backward, batch_norm_forward, BatchNormCache, BatchNormGrads, BatchNormState, NormMode};
pub use tensor::Tensor;
