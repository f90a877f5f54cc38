//! Parameter materialization.

use super::expand::{expand, expand_bottleneck_desc, head_desc};
use super::model::{Block, Layer, Mode, Model, Node};
use super::{ArchSpec, BottleneckSpec, DescNode, Head, LayerDesc, LayerKind, Nonlinearity, Resolution, Variant};
use crate::error::Result;
use crate::ops::{
    BatchNormParams, ConvParams, DenseParams, DepthwiseConvParams, GDConvParams, PReLUParams, DEFAULT_PRELU_SLOPE,
};
use crate::tensor::{Rng, Scalar, Tensor};

/// He-normal tensor: N(0, √(2 / fan_in)).
fn he<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    Tensor::rand_normal(shape, T::zero(), T::of((2.0 / fan_in as f64).sqrt()), rng)
}

fn layer<T: Scalar>(d: &LayerDesc, rng: &mut Rng) -> Result<Layer<T>> {
    let [in_c, _, _] = d.input;
    let [out_c, _, _] = d.output;
    let (kh, kw) = d.kernel;
    let bias = |n: usize| -> Result<Option<Tensor<T>>> {
        if d.bias {
            Ok(Some(Tensor::zeros(&[n])?))
        } else {
            Ok(None)
        }
    };
    Ok(match d.kind {
        LayerKind::Conv => Layer::Conv(ConvParams {
            weight: he(&[out_c, in_c, kh, kw], in_c * kh * kw, rng)?,
            bias: bias(out_c)?,
            stride: d.stride,
            padding: d.padding,
        }),
        LayerKind::Depthwise => Layer::Depthwise(DepthwiseConvParams {
            weight: he(&[in_c, 1, kh, kw], kh * kw, rng)?,
            bias: bias(in_c)?,
            stride: d.stride,
            padding: d.padding,
        }),
        LayerKind::GDConv => Layer::GDConv(GDConvParams {
            kernel: he(&[in_c, 1, kh, kw], kh * kw, rng)?,
            bias: bias(in_c)?,
        }),
        LayerKind::BatchNorm => Layer::BatchNorm(BatchNormParams::identity(in_c)?),
        LayerKind::PRelu => Layer::PRelu(PReLUParams::new(in_c, T::of(DEFAULT_PRELU_SLOPE))?),
        LayerKind::Relu => Layer::Relu,
        LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
        LayerKind::Dense => {
            let fan_in = d.input.iter().product();
            Layer::Dense(DenseParams {
                weight: he(&[out_c, fan_in], fan_in, rng)?,
                bias: bias(out_c)?,
            })
        }
    })
}

fn leaf<T: Scalar>(d: &LayerDesc, rng: &mut Rng) -> Result<Node<T>> {
    Ok(Node {
        name: d.name.clone(),
        layer: layer(d, rng)?,
        is_global: d.is_global,
        post_global: d.post_global,
    })
}

/// Draws parameters for every descriptor in order.
pub fn materialize<T: Scalar>(descs: &[DescNode], rng: &mut Rng) -> Result<Vec<Node<T>>> {
    descs
        .iter()
        .map(|d| match d {
            DescNode::Layer(l) => leaf(l, rng),
            DescNode::Block { name, shortcut, layers } => Ok(Node {
                name: name.clone(),
                layer: Layer::Block(Block {
                    nodes: layers.iter().map(|l| leaf(l, rng)).collect::<Result<_>>()?,
                    shortcut: *shortcut,
                }),
                is_global: false,
                post_global: layers.first().is_some_and(|l| l.post_global),
            }),
        })
        .collect()
}

pub fn build_model<T: Scalar>(arch: &ArchSpec, rng: &mut Rng) -> Result<Model<T>> {
    let nodes = materialize(&expand(arch)?, rng)?;
    Model::new(arch.clone(), nodes, Mode::Eval)
}

pub fn build_mobilefacenet(variant: Variant, input: Resolution, rng: &mut Rng) -> Result<Model> {
    build_model(&ArchSpec::mobilefacenet(variant, input)?, rng)
}

/// Standalone head over a `C, H, W` feature map.
pub fn build_head_variant(head: Head, fmap: [usize; 3], embedding_dim: usize, rng: &mut Rng) -> Result<Vec<Node>> {
    materialize(&head_desc(head, fmap, embedding_dim)?, rng)
}

/// Layer descriptors of one bottleneck sequence applied to `in_channels × in_spatial`.
pub fn expand_bottleneck(
    spec: &BottleneckSpec,
    in_channels: usize,
    in_spatial: (usize, usize),
    nonlinearity: Nonlinearity,
) -> Result<Vec<DescNode>> {
    expand_bottleneck_desc(spec, in_channels, in_spatial, nonlinearity)
}
