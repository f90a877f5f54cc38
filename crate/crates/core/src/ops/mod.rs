//! Layer primitives with forward and analytic backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod depthwise;
pub mod gdconv;
pub(crate) mod kernel;

pub use activation::{DEFAULT_PRELU_SLOPE, prelu_backward, prelu_forward, relu_backward, relu_forward, PReLUParams};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_cached, BatchNormParams, BnCache, BnMode, DEFAULT_EPS,
    DEFAULT_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_reference, ConvParams};
pub use dense::{dense_backward, dense_forward, global_avg_pool_backward, global_avg_pool_forward, DenseParams};
pub use depthwise::{
    depthwise_conv2d_backward, depthwise_conv2d_forward, depthwise_conv2d_forward_reference,
    DepthwiseConvParams,
};
pub use gdconv::{gdconv_backward, gdconv_forward, GDConvParams};
pub use kernel::out_extent;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// An op together with the parameters its backward pass needs.
#[derive(Clone, Copy, Debug)]
pub enum Op<'a, T: Scalar> {
    Conv(&'a ConvParams<T>),
    Depthwise(&'a DepthwiseConvParams<T>),
    GDConv(&'a GDConvParams<T>),
    BatchNorm(&'a BatchNormParams<T>, &'a BnCache<T>),
    PRelu(&'a PReLUParams<T>),
    Relu,
    Dense(&'a DenseParams<T>),
    GlobalAvgPool,
}

/// Input gradient plus parameter gradients in the op's parameter order
/// (weight, then bias if present; γ then β; PReLU slopes).
#[derive(Clone, Debug, PartialEq)]
pub struct OpGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

/// Backward pass of any op given the input saved during forward. Batch norm
/// reads its saved values from the cache carried by [`Op::BatchNorm`].
pub fn op_backward<T: Scalar>(op: Op<'_, T>, saved_input: &Tensor<T>, upstream: &Tensor<T>) -> Result<OpGrads<T>> {
    let (input, params) = match op {
        Op::Conv(p) => {
            let (gi, g) = conv2d_backward(saved_input, p, upstream)?;
            (gi, std::iter::once(g.weight).chain(g.bias).collect())
        }
        Op::Depthwise(p) => {
            let (gi, g) = depthwise_conv2d_backward(saved_input, p, upstream)?;
            (gi, std::iter::once(g.weight).chain(g.bias).collect())
        }
        Op::GDConv(p) => {
            let (gi, g) = gdconv_backward(saved_input, p, upstream)?;
            (gi, std::iter::once(g.kernel).chain(g.bias).collect())
        }
        Op::BatchNorm(p, cache) => {
            let (gi, g) = batchnorm_backward(cache, p, upstream)?;
            (gi, vec![g.gamma, g.beta])
        }
        Op::PRelu(p) => {
            let (gi, gs) = prelu_backward(saved_input, p, upstream)?;
            (gi, vec![gs])
        }
        Op::Relu => (relu_backward(saved_input, upstream)?, Vec::new()),
        Op::Dense(p) => {
            let (gi, g) = dense_backward(saved_input, p, upstream)?;
            (gi, std::iter::once(g.weight).chain(g.bias).collect())
        }
        Op::GlobalAvgPool => (global_avg_pool_backward(saved_input.dims4()?, upstream)?, Vec::new()),
    };
    Ok(OpGrads { input, params })
}
