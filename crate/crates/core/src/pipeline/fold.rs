//! Batch-norm folding.

use crate::arch::{Block, Layer, Mode, Model, Node};
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Scalar, Tensor};

/// Scales each output channel of `weight` (channel-major) and returns the folded
/// bias `β + (b − μ)·γ/√(σ²+ε)`.
fn fold_into<T: Scalar>(
    weight: &mut Tensor<T>,
    bias: &Option<Tensor<T>>,
    bn: &BatchNormParams<T>,
    name: &str,
) -> Result<Tensor<T>> {
    let channels = weight.shape()[0];
    if channels != bn.channels() {
        return Err(Error::Structural(format!(
            "{name}: {channels} output channels but the following batch norm has {}",
            bn.channels()
        )));
    }
    let scale = bn.eval_scale();
    let per = weight.len() / channels;
    for (c, chunk) in weight.data_mut().chunks_mut(per).enumerate() {
        for v in chunk {
            *v *= scale[c];
        }
    }
    let mean = bn.running_mean.data();
    let beta = bn.beta.data();
    let data = (0..channels)
        .map(|c| {
            let b = bias.as_ref().map_or(T::zero(), |b| b.data()[c]);
            beta[c] + (b - mean[c]) * scale[c]
        })
        .collect();
    Tensor::from_vec(&[channels], data)
}

fn fold_nodes<T: Scalar>(nodes: &[Node<T>]) -> Result<Vec<Node<T>>> {
    let mut out: Vec<Node<T>> = Vec::with_capacity(nodes.len());
    for node in nodes {
        match &node.layer {
            Layer::BatchNorm(bn) => {
                let Some(prev) = out.last_mut() else {
                    return Err(Error::Structural(format!("{}: batch norm has no preceding layer", node.name)));
                };
                let name = prev.name.clone();
                match &mut prev.layer {
                    Layer::Conv(p) => p.bias = Some(fold_into(&mut p.weight, &p.bias, bn, &name)?),
                    Layer::Depthwise(p) => p.bias = Some(fold_into(&mut p.weight, &p.bias, bn, &name)?),
                    Layer::GDConv(p) => p.bias = Some(fold_into(&mut p.kernel, &p.bias, bn, &name)?),
                    Layer::Dense(p) => p.bias = Some(fold_into(&mut p.weight, &p.bias, bn, &name)?),
                    _ => {
                        return Err(Error::Structural(format!(
                            "{}: batch norm follows {name}, which is not a foldable linear layer",
                            node.name
                        )))
                    }
                }
            }
            Layer::Block(b) => out.push(Node {
                layer: Layer::Block(Block {
                    nodes: fold_nodes(&b.nodes)?,
                    shortcut: b.shortcut,
                }),
                ..node.clone()
            }),
            _ => out.push(node.clone()),
        }
    }
    Ok(out)
}

/// Merges every batch norm into the linear layer before it, using running
/// statistics. The result is in [`Mode::Folded`].
pub fn fold_batchnorm<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    match model.mode() {
        Mode::Eval => {}
        Mode::Train => return Err(Error::InvalidArgument("fold_batchnorm needs an eval-mode model".into())),
        Mode::Folded => return Err(Error::InvalidArgument("model is already folded".into())),
    }
    Model::new(model.arch().clone(), fold_nodes(model.nodes())?, Mode::Folded)
}
