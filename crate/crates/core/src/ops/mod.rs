//! Differentiable primitives. Each forward has a matching backward that
//! consumes the operands saved by the forward pass.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use activation::{activation_backward, activation_forward, Activation};
pub use batchnorm::{batch_norm_backward, batch_norm_forward, BatchNormCache, BatchNormState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use loss::softmax_cross_entropy;
pub use pool::{
    global_avg_pool, global_avg_pool_backward, max_pool_backward, max_pool_forward, MaxPoolParams,
};

/// Train mode uses batch statistics and records what backward needs; eval
/// mode uses running statistics and records nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
