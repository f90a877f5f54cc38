//! Materialized networks: parameterized layer sequences with forward and
//! backward passes.

use super::{ArchSpec, LayerKind};
use crate::error::{shape_err, Error, Result};
use crate::ops::{
    self, batchnorm_forward_cached, BatchNormParams, BnCache, BnMode, ConvParams, DenseParams,
    DepthwiseConvParams, GDConvParams, Op, PReLUParams,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T: Scalar = f32> {
    Conv(ConvParams<T>),
    Depthwise(DepthwiseConvParams<T>),
    GDConv(GDConvParams<T>),
    BatchNorm(BatchNormParams<T>),
    PRelu(PReLUParams<T>),
    Relu,
    GlobalAvgPool,
    Dense(DenseParams<T>),
    Block(Block<T>),
}

/// Inverted-residual block: inner layers plus an optional identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub nodes: Vec<Node<T>>,
    pub shortcut: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T: Scalar = f32> {
    pub name: String,
    pub layer: Layer<T>,
    pub is_global: bool,
    pub post_global: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Slope,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::Slope => "slope",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    /// `<node>.<suffix>`, unique within a model.
    pub name: String,
    pub node: String,
    pub kind: ParamKind,
    pub layer: LayerKind,
    pub is_global: bool,
    pub post_global: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
    /// Batch norm folded into the preceding linear layers.
    Folded,
}

/// Values a layer saved during a recorded forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Saved<T: Scalar = f32> {
    Nothing,
    Input(Tensor<T>),
    /// Input of a PReLU/ReLU; kept separately so kink crossings can be detected.
    Activation(Tensor<T>),
    Bn(BnCache<T>),
    Pool([usize; 4]),
    Block(Tape<T>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tape<T: Scalar = f32> {
    pub saved: Vec<Saved<T>>,
}

impl<T: Scalar> Tape<T> {
    /// `x > 0` for every recorded nonlinearity input, in forward order.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut out = Vec::new();
        fn walk<T: Scalar>(t: &Tape<T>, out: &mut Vec<bool>) {
            for s in &t.saved {
                match s {
                    Saved::Activation(x) => out.extend(x.data().iter().map(|&v| v > T::zero())),
                    Saved::Block(inner) => walk(inner, out),
                    _ => {}
                }
            }
        }
        walk(self, &mut out);
        out
    }
}

/// Result of a backward pass through a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Backward<T: Scalar = f32> {
    pub input: Tensor<T>,
    /// In the order of [`Model::params`].
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> Option<LayerKind> {
        Some(match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Depthwise(_) => LayerKind::Depthwise,
            Layer::GDConv(_) => LayerKind::GDConv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::PRelu(_) => LayerKind::PRelu,
            Layer::Relu => LayerKind::Relu,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Block(_) => return None,
        })
    }

    /// Own tensors (not those of inner block nodes).
    pub fn tensors(&self) -> Vec<(ParamKind, &Tensor<T>)> {
        use ParamKind::*;
        match self {
            Layer::Conv(p) => std::iter::once((Weight, &p.weight)).chain(p.bias.iter().map(|b| (Bias, b))).collect(),
            Layer::Depthwise(p) => {
                std::iter::once((Weight, &p.weight)).chain(p.bias.iter().map(|b| (Bias, b))).collect()
            }
            Layer::GDConv(p) => std::iter::once((Weight, &p.kernel)).chain(p.bias.iter().map(|b| (Bias, b))).collect(),
            Layer::Dense(p) => std::iter::once((Weight, &p.weight)).chain(p.bias.iter().map(|b| (Bias, b))).collect(),
            Layer::BatchNorm(p) => vec![
                (Gamma, &p.gamma),
                (Beta, &p.beta),
                (RunningMean, &p.running_mean),
                (RunningVar, &p.running_var),
            ],
            Layer::PRelu(p) => vec![(Slope, &p.slope)],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Block(_) => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut Tensor<T>)> {
        use ParamKind::*;
        match self {
            Layer::Conv(p) => std::iter::once((Weight, &mut p.weight))
                .chain(p.bias.iter_mut().map(|b| (Bias, b)))
                .collect(),
            Layer::Depthwise(p) => std::iter::once((Weight, &mut p.weight))
                .chain(p.bias.iter_mut().map(|b| (Bias, b)))
                .collect(),
            Layer::GDConv(p) => std::iter::once((Weight, &mut p.kernel))
                .chain(p.bias.iter_mut().map(|b| (Bias, b)))
                .collect(),
            Layer::Dense(p) => std::iter::once((Weight, &mut p.weight))
                .chain(p.bias.iter_mut().map(|b| (Bias, b)))
                .collect(),
            Layer::BatchNorm(p) => vec![
                (Gamma, &mut p.gamma),
                (Beta, &mut p.beta),
                (RunningMean, &mut p.running_mean),
                (RunningVar, &mut p.running_var),
            ],
            Layer::PRelu(p) => vec![(Slope, &mut p.slope)],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Block(_) => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        match self {
            Layer::Conv(p) => p.output_shape(input),
            Layer::Depthwise(p) => p.output_shape(input),
            Layer::GDConv(p) => p.output_shape(input),
            Layer::Dense(p) => p.output_shape(input),
            Layer::BatchNorm(p) if p.channels() != input[1] => Err(shape_err("batchnorm", "channel mismatch")),
            Layer::PRelu(p) if p.channels() != input[1] => Err(shape_err("prelu", "channel mismatch")),
            Layer::GlobalAvgPool => Ok([input[0], input[1], 1, 1]),
            Layer::BatchNorm(_) | Layer::PRelu(_) | Layer::Relu => Ok(input),
            Layer::Block(b) => {
                let out = b.nodes.iter().try_fold(input, |s, n| n.layer.output_shape(s))?;
                if b.shortcut && out != input {
                    return Err(shape_err("block", "shortcut needs matching input and output"));
                }
                Ok(out)
            }
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        let opt = |b: &Option<Tensor<T>>| b.as_ref().map(Tensor::cast);
        match self {
            Layer::Conv(p) => Layer::Conv(ConvParams {
                weight: p.weight.cast(),
                bias: opt(&p.bias),
                stride: p.stride,
                padding: p.padding,
            }),
            Layer::Depthwise(p) => Layer::Depthwise(DepthwiseConvParams {
                weight: p.weight.cast(),
                bias: opt(&p.bias),
                stride: p.stride,
                padding: p.padding,
            }),
            Layer::GDConv(p) => Layer::GDConv(GDConvParams {
                kernel: p.kernel.cast(),
                bias: opt(&p.bias),
            }),
            Layer::BatchNorm(p) => Layer::BatchNorm(BatchNormParams {
                gamma: p.gamma.cast(),
                beta: p.beta.cast(),
                running_mean: p.running_mean.cast(),
                running_var: p.running_var.cast(),
                eps: U::of(p.eps.as_f64()),
                momentum: U::of(p.momentum.as_f64()),
            }),
            Layer::PRelu(p) => Layer::PRelu(PReLUParams { slope: p.slope.cast() }),
            Layer::Relu => Layer::Relu,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Dense(p) => Layer::Dense(DenseParams {
                weight: p.weight.cast(),
                bias: opt(&p.bias),
            }),
            Layer::Block(b) => Layer::Block(Block {
                nodes: b.nodes.iter().map(Node::cast).collect(),
                shortcut: b.shortcut,
            }),
        }
    }
}

impl<T: Scalar> Node<T> {
    fn cast<U: Scalar>(&self) -> Node<U> {
        Node {
            name: self.name.clone(),
            layer: self.layer.cast(),
            is_global: self.is_global,
            post_global: self.post_global,
        }
    }
}

fn collect_tensors<'a, T: Scalar>(nodes: &'a [Node<T>], out: &mut Vec<(ParamInfo, &'a Tensor<T>)>) {
    for node in nodes {
        if let Layer::Block(b) = &node.layer {
            collect_tensors(&b.nodes, out);
            continue;
        }
        let layer = node.layer.kind().expect("non-block layer");
        for (kind, t) in node.layer.tensors() {
            out.push((
                ParamInfo {
                    name: format!("{}.{}", node.name, kind.suffix()),
                    node: node.name.clone(),
                    kind,
                    layer,
                    is_global: node.is_global,
                    post_global: node.post_global,
                },
                t,
            ));
        }
    }
}

fn collect_tensors_mut<'a, T: Scalar>(nodes: &'a mut [Node<T>], out: &mut Vec<(ParamKind, &'a mut Tensor<T>)>) {
    for node in nodes {
        match &mut node.layer {
            Layer::Block(b) => collect_tensors_mut(&mut b.nodes, out),
            layer => out.extend(layer.tensors_mut()),
        }
    }
}

fn forward_layer<T: Scalar>(layer: &Layer<T>, x: Tensor<T>, bn: BnMode, record: bool) -> Result<(Tensor<T>, Saved<T>)> {
    let keep = |x: Tensor<T>| if record { Saved::Input(x) } else { Saved::Nothing };
    Ok(match layer {
        Layer::Conv(p) => (ops::conv2d_forward(&x, p)?, keep(x)),
        Layer::Depthwise(p) => (ops::depthwise_conv2d_forward(&x, p)?, keep(x)),
        Layer::GDConv(p) => (ops::gdconv_forward(&x, p)?, keep(x)),
        Layer::Dense(p) => (ops::dense_forward(&x, p)?, keep(x)),
        Layer::BatchNorm(p) => {
            let (y, cache) = batchnorm_forward_cached(&x, p, bn)?;
            (y, if record { Saved::Bn(cache) } else { Saved::Nothing })
        }
        Layer::PRelu(p) => {
            let y = ops::prelu_forward(&x, p)?;
            (y, if record { Saved::Activation(x) } else { Saved::Nothing })
        }
        Layer::Relu => {
            let y = ops::relu_forward(&x);
            (y, if record { Saved::Activation(x) } else { Saved::Nothing })
        }
        Layer::GlobalAvgPool => {
            let dims = x.dims4()?;
            (ops::global_avg_pool_forward(&x)?, Saved::Pool(dims))
        }
        Layer::Block(b) => {
            let skip = b.shortcut.then(|| x.clone());
            let (mut y, saved) = forward_nodes(&b.nodes, x, bn, record)?;
            if let Some(s) = skip {
                if s.shape() != y.shape() {
                    return Err(shape_err("block", "shortcut needs matching input and output"));
                }
                for (o, &i) in y.data_mut().iter_mut().zip(s.data()) {
                    *o += i;
                }
            }
            (y, Saved::Block(Tape { saved }))
        }
    })
}

fn forward_nodes<T: Scalar>(nodes: &[Node<T>], mut x: Tensor<T>, bn: BnMode, record: bool) -> Result<(Tensor<T>, Vec<Saved<T>>)> {
    let mut saved = Vec::with_capacity(if record { nodes.len() } else { 0 });
    for node in nodes {
        let (y, s) = forward_layer(&node.layer, x, bn, record)
            .map_err(|e| match e {
                Error::ShapeMismatch { op, detail } => Error::ShapeMismatch {
                    op,
                    detail: format!("at layer {}: {detail}", node.name),
                },
                e => e,
            })?;
        if record {
            saved.push(s);
        }
        x = y;
    }
    Ok((x, saved))
}

fn zero_grads<T: Scalar>(node: &Node<T>, out: &mut Vec<Tensor<T>>) {
    match &node.layer {
        Layer::Block(b) => b.nodes.iter().for_each(|n| zero_grads(n, out)),
        l => out.extend(
            l.tensors()
                .into_iter()
                .filter(|(k, _)| k.learnable())
                .map(|(_, t)| t.zeros_like()),
        ),
    }
}

fn missing(name: &str) -> Error {
    Error::InvalidArgument(format!("tape has no saved values for layer {name}"))
}

fn backward_layer<T: Scalar>(node: &Node<T>, saved: &Saved<T>, grad: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let run = |op: Op<'_, T>, x: &Tensor<T>, g: &Tensor<T>| -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let r = ops::op_backward(op, x, g)?;
        Ok((r.input, r.params))
    };
    match (&node.layer, saved) {
        (Layer::Conv(p), Saved::Input(x)) => run(Op::Conv(p), x, &grad),
        (Layer::Depthwise(p), Saved::Input(x)) => run(Op::Depthwise(p), x, &grad),
        (Layer::GDConv(p), Saved::Input(x)) => run(Op::GDConv(p), x, &grad),
        (Layer::Dense(p), Saved::Input(x)) => run(Op::Dense(p), x, &grad),
        (Layer::BatchNorm(p), Saved::Bn(cache)) => run(Op::BatchNorm(p, cache), &cache.x_hat, &grad),
        (Layer::PRelu(p), Saved::Activation(x)) => run(Op::PRelu(p), x, &grad),
        (Layer::Relu, Saved::Activation(x)) => run(Op::Relu, x, &grad),
        (Layer::GlobalAvgPool, Saved::Pool(dims)) => {
            Ok((ops::global_avg_pool_backward(*dims, &grad)?, Vec::new()))
        }
        (Layer::Block(b), Saved::Block(tape)) => {
            let (mut gi, inner) = backward_nodes(&b.nodes, &tape.saved, grad.clone())?;
            if b.shortcut {
                for (o, &g) in gi.data_mut().iter_mut().zip(grad.data()) {
                    *o += g;
                }
            }
            Ok((gi, inner))
        }
        _ => Err(missing(&node.name)),
    }
}

/// Backpropagates through the first `saved.len()` nodes. Parameters of nodes
/// beyond the tape get zero gradients.
fn backward_nodes<T: Scalar>(nodes: &[Node<T>], saved: &[Saved<T>], mut grad: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if saved.len() > nodes.len() {
        return Err(Error::InvalidArgument("tape is longer than the layer list".into()));
    }
    let mut per_node: Vec<Vec<Tensor<T>>> = vec![Vec::new(); nodes.len()];
    for i in (0..saved.len()).rev() {
        let (g, pg) = backward_layer(&nodes[i], &saved[i], grad)?;
        per_node[i] = pg;
        grad = g;
    }
    for (i, node) in nodes.iter().enumerate().skip(saved.len()) {
        zero_grads(node, &mut per_node[i]);
    }
    Ok((grad, per_node.into_iter().flatten().collect()))
}

fn update_running<T: Scalar>(nodes: &mut [Node<T>], saved: &[Saved<T>]) {
    for (node, s) in nodes.iter_mut().zip(saved) {
        match (&mut node.layer, s) {
            (Layer::BatchNorm(p), Saved::Bn(cache)) if cache.mode == BnMode::Train => p.update_running(cache),
            (Layer::Block(b), Saved::Block(t)) => update_running(&mut b.nodes, &t.saved),
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    arch: ArchSpec,
    nodes: Vec<Node<T>>,
    mode: Mode,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: ArchSpec, nodes: Vec<Node<T>>, mode: Mode) -> Result<Self> {
        let model = Self { arch, nodes, mode };
        model.output_shape(1)?;
        if mode == Mode::Folded && model.contains_batchnorm() {
            return Err(Error::Structural("folded models cannot contain batch norm".into()));
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        let folded = self.mode == Mode::Folded;
        if folded != (mode == Mode::Folded) {
            return Err(Error::InvalidArgument(format!(
                "cannot switch a {:?} model to {mode:?}; use fold_batchnorm",
                self.mode
            )));
        }
        self.mode = mode;
        Ok(())
    }

    pub fn contains_batchnorm(&self) -> bool {
        fn any<T: Scalar>(nodes: &[Node<T>]) -> bool {
            nodes.iter().any(|n| match &n.layer {
                Layer::BatchNorm(_) => true,
                Layer::Block(b) => any(&b.nodes),
                _ => false,
            })
        }
        any(&self.nodes)
    }

    fn bn_mode(&self) -> BnMode {
        if self.mode == Mode::Train {
            BnMode::Train
        } else {
            BnMode::Eval
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let r = self.arch.input;
        if (c, h, w) != (3, r.height, r.width) {
            return Err(shape_err(
                "model",
                format!("input {c}×{h}×{w} does not match model input 3×{}×{}", r.height, r.width),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(forward_nodes(&self.nodes, x.clone(), self.bn_mode(), false)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_prefix_tape(x, self.nodes.len())
    }

    /// Recorded forward through the first `end` top-level nodes.
    pub fn forward_prefix_tape(&self, x: &Tensor<T>, end: usize) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        if end > self.nodes.len() {
            return Err(Error::InvalidArgument(format!("prefix {end} exceeds {} layers", self.nodes.len())));
        }
        let (y, saved) = forward_nodes(&self.nodes[..end], x.clone(), self.bn_mode(), true)?;
        Ok((y, Tape { saved }))
    }

    pub fn backward(&self, tape: &Tape<T>, grad_out: Tensor<T>) -> Result<Backward<T>> {
        let (input, params) = backward_nodes(&self.nodes, &tape.saved, grad_out)?;
        Ok(Backward { input, params })
    }

    /// Applies the running-statistics update of every train-mode batch norm in `tape`.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        update_running(&mut self.nodes, &tape.saved);
    }

    /// Every tensor including batch-norm running statistics, in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamInfo, &Tensor<T>)> {
        let mut out = Vec::new();
        collect_tensors(&self.nodes, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        collect_tensors_mut(&mut self.nodes, &mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }

    /// Learnable tensors only.
    pub fn params(&self) -> Vec<(ParamInfo, &Tensor<T>)> {
        self.tensors().into_iter().filter(|(i, _)| i.kind.learnable()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        collect_tensors_mut(&mut self.nodes, &mut out);
        out.into_iter().filter(|(k, _)| k.learnable()).map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn output_shape(&self, batch: usize) -> Result<[usize; 4]> {
        let r = self.arch.input;
        self.nodes
            .iter()
            .try_fold([batch, 3, r.height, r.width], |s, n| n.layer.output_shape(s))
    }

    pub fn embedding_dim(&self) -> usize {
        self.output_shape(1).map(|s| s[1]).unwrap_or(0)
    }

    /// Index of the top-level global-operator node.
    pub fn global_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.is_global)
    }

    pub fn gdconv(&self) -> Option<&GDConvParams<T>> {
        self.nodes.iter().find_map(|n| match &n.layer {
            Layer::GDConv(p) => Some(p),
            _ => None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            nodes: self.nodes.iter().map(Node::cast).collect(),
            mode: self.mode,
        }
    }
}
