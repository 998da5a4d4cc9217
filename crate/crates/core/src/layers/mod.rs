//! Forward and backward passes for every layer kind the network uses.
//!
//! Each layer is a pair of free functions over explicit parameter structs.
//! Backward functions take whatever the forward pass cached and return
//! gradients; they never mutate parameters.

mod activation;
pub(crate) mod conv;
mod dense;
mod dropout;
mod norm;
mod pool;
mod shape_ops;

pub use activation::{relu_backward, tanh_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseParams};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use norm::{
    batchnorm_backward, batchnorm_forward, batchnorm_apply, BatchNormCache, BatchNormGrads,
    BatchNormParams,
};
pub use pool::{
    avgpool_backward, avgpool_forward, maxpool_backward, maxpool_forward, PoolParams,
};
pub use shape_ops::{concat_channels, log_softmax_rows, softmax_rows, split_channels};

/// Whether layers with train-time behaviour (batch norm, dropout) run in
/// training or inference form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
