//! Row expansion into layer descriptors and static shape propagation.

use std::fmt;

use super::{ArchSpec, BottleneckSpec, Head, Nonlinearity, Row, RowOp};
use crate::error::{Error, Result};
use crate::ops::out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Depthwise,
    GDConv,
    BatchNorm,
    PRelu,
    Relu,
    GlobalAvgPool,
    Dense,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Depthwise => "dwconv",
            LayerKind::GDConv => "gdconv",
            LayerKind::BatchNorm => "bn",
            LayerKind::PRelu => "prelu",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "gapool",
            LayerKind::Dense => "fc",
        })
    }
}

/// A materializable layer with its static shapes (`C, H, W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
    /// Index of the row this layer came from.
    pub row: usize,
    /// The global operator (GDConv, GAPool or FC head).
    pub is_global: bool,
    /// Positioned strictly after the global operator.
    pub post_global: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DescNode {
    Layer(LayerDesc),
    /// Inverted-residual bottleneck; `shortcut` adds the block input to its output.
    Block {
        name: String,
        shortcut: bool,
        layers: Vec<LayerDesc>,
    },
}

impl DescNode {
    pub fn output(&self) -> [usize; 3] {
        match self {
            DescNode::Layer(l) => l.output,
            DescNode::Block { layers, .. } => layers.last().map(|l| l.output).unwrap_or([0; 3]),
        }
    }

    pub fn layers(&self) -> Vec<&LayerDesc> {
        match self {
            DescNode::Layer(l) => vec![l],
            DescNode::Block { layers, .. } => layers.iter().collect(),
        }
    }
}

struct Cursor {
    shape: [usize; 3],
    row: usize,
    seen_global: bool,
}

impl Cursor {
    fn layer(
        &mut self,
        name: String,
        kind: LayerKind,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<LayerDesc> {
        let [c, h, w] = self.shape;
        let bad = || {
            Error::Structural(format!(
                "layer {name}: kernel {}x{} stride {} pad {} does not fit {c}×{h}×{w}",
                kernel.0, kernel.1, stride.0, padding.0
            ))
        };
        let output = match kind {
            LayerKind::Conv | LayerKind::Depthwise | LayerKind::GDConv => [
                out_c,
                out_extent(h, kernel.0, stride.0, padding.0).ok_or_else(bad)?,
                out_extent(w, kernel.1, stride.1, padding.1).ok_or_else(bad)?,
            ],
            LayerKind::GlobalAvgPool | LayerKind::Dense => [out_c, 1, 1],
            LayerKind::BatchNorm | LayerKind::PRelu | LayerKind::Relu => self.shape,
        };
        let is_global = matches!(kind, LayerKind::GDConv | LayerKind::GlobalAvgPool | LayerKind::Dense)
            && !self.seen_global;
        let desc = LayerDesc {
            name,
            kind,
            input: self.shape,
            output,
            kernel,
            stride,
            padding,
            bias: false,
            row: self.row,
            is_global,
            post_global: self.seen_global,
        };
        if is_global {
            self.seen_global = true;
        }
        self.shape = output;
        Ok(desc)
    }

    fn conv(&mut self, name: String, out_c: usize, k: usize, s: usize, p: usize) -> Result<LayerDesc> {
        self.layer(name, LayerKind::Conv, out_c, (k, k), (s, s), (p, p))
    }

    fn depthwise(&mut self, name: String, k: usize, s: usize, p: usize) -> Result<LayerDesc> {
        let c = self.shape[0];
        self.layer(name, LayerKind::Depthwise, c, (k, k), (s, s), (p, p))
    }

    fn bn(&mut self, name: String) -> Result<LayerDesc> {
        let c = self.shape[0];
        self.layer(name, LayerKind::BatchNorm, c, (1, 1), (1, 1), (0, 0))
    }

    fn act(&mut self, name: String, nl: Nonlinearity) -> Result<LayerDesc> {
        let c = self.shape[0];
        let kind = match nl {
            Nonlinearity::PRelu => LayerKind::PRelu,
            Nonlinearity::Relu => LayerKind::Relu,
        };
        self.layer(name, kind, c, (1, 1), (1, 1), (0, 0))
    }
}

fn rep_name(row: usize, n: usize, k: usize) -> String {
    if n == 1 {
        format!("r{row}")
    } else {
        format!("r{row}.{k}")
    }
}

fn bottleneck_blocks(
    cur: &mut Cursor,
    spec: &BottleneckSpec,
    nl: Nonlinearity,
    prefix: &dyn Fn(usize) -> String,
) -> Result<Vec<DescNode>> {
    spec.validate()?;
    let mut blocks = Vec::with_capacity(spec.n);
    for k in 0..spec.n {
        let stride = if k == 0 { spec.s } else { 1 };
        let name = prefix(k);
        let in_c = cur.shape[0];
        let wide = spec.t * in_c;
        let layers = vec![
            cur.conv(format!("{name}.expand"), wide, 1, 1, 0)?,
            cur.bn(format!("{name}.expand.bn"))?,
            cur.act(format!("{name}.expand.act"), nl)?,
            cur.depthwise(format!("{name}.dw"), 3, stride, 1)?,
            cur.bn(format!("{name}.dw.bn"))?,
            cur.act(format!("{name}.dw.act"), nl)?,
            cur.conv(format!("{name}.project"), spec.c, 1, 1, 0)?,
            cur.bn(format!("{name}.project.bn"))?,
        ];
        blocks.push(DescNode::Block {
            name,
            shortcut: stride == 1 && in_c == spec.c,
            layers,
        });
    }
    Ok(blocks)
}

/// Expands one bottleneck sequence applied to an `in_channels × in_spatial`
/// input. Blocks are named `b0, b1, …`.
pub(crate) fn expand_bottleneck_desc(
    spec: &BottleneckSpec,
    in_channels: usize,
    in_spatial: (usize, usize),
    nl: Nonlinearity,
) -> Result<Vec<DescNode>> {
    if in_channels == 0 || in_spatial.0 == 0 || in_spatial.1 == 0 {
        return Err(Error::InvalidArgument("bottleneck input must be non-empty".into()));
    }
    let mut cur = Cursor {
        shape: [in_channels, in_spatial.0, in_spatial.1],
        row: 0,
        seen_global: false,
    };
    bottleneck_blocks(&mut cur, spec, nl, &|k| format!("b{k}"))
}

/// Layers of a standalone head on an `fmap` feature map. GDConv and GAPool
/// heads keep the channel count and get a linear 1×1 projection only when
/// `embedding_dim` differs from it; the FC head maps straight to `embedding_dim`.
pub(crate) fn head_desc(head: Head, fmap: [usize; 3], embedding_dim: usize) -> Result<Vec<DescNode>> {
    let [c, h, w] = fmap;
    if c == 0 || h == 0 || w == 0 || embedding_dim == 0 {
        return Err(Error::InvalidArgument("head needs a non-empty feature map and embedding".into()));
    }
    let mut cur = Cursor {
        shape: fmap,
        row: 0,
        seen_global: false,
    };
    let mut out = Vec::new();
    match head {
        Head::GDConv => out.push(cur.layer("head.gdconv".into(), LayerKind::GDConv, c, (h, w), (1, 1), (0, 0))?),
        Head::GAPool => out.push(cur.layer("head.gapool".into(), LayerKind::GlobalAvgPool, c, (1, 1), (1, 1), (0, 0))?),
        Head::Fc => out.push(cur.layer("head.fc".into(), LayerKind::Dense, embedding_dim, (1, 1), (1, 1), (0, 0))?),
    }
    if head != Head::Fc && embedding_dim != c {
        out.push(cur.conv("head.project".into(), embedding_dim, 1, 1, 0)?);
    }
    Ok(out.into_iter().map(DescNode::Layer).collect())
}

fn expand_row(cur: &mut Cursor, arch: &ArchSpec, ri: usize, row: &Row) -> Result<Vec<DescNode>> {
    cur.row = ri;
    let nl = arch.nonlinearity;
    let in_c = cur.shape[0];
    let structural = |msg: String| Error::Structural(format!("row {ri} ({}): {msg}", row.op.as_str()));
    if row.n == 0 || !(1..=2).contains(&row.s) || row.c == 0 {
        return Err(structural("needs c ≥ 1, n ≥ 1 and s ∈ {1, 2}".into()));
    }
    if row.op.is_global() && (row.n != 1 || row.s != 1) {
        return Err(structural("global operators take n = 1 and s = 1".into()));
    }
    let mut out = Vec::new();
    let leaf = |d: LayerDesc| DescNode::Layer(d);
    match row.op {
        RowOp::Conv3x3 | RowOp::Conv1x1 => {
            let (k, p) = if row.op == RowOp::Conv3x3 { (3, 1) } else { (1, 0) };
            for rep in 0..row.n {
                let s = if rep == 0 { row.s } else { 1 };
                let name = rep_name(ri, row.n, rep);
                out.push(leaf(cur.conv(format!("{name}.conv"), row.c, k, s, p)?));
                out.push(leaf(cur.bn(format!("{name}.bn"))?));
                out.push(leaf(cur.act(format!("{name}.act"), nl)?));
            }
        }
        RowOp::DwConv3x3 => {
            if row.c != in_c {
                return Err(structural(format!("depthwise keeps channels, {in_c} in but c = {}", row.c)));
            }
            for rep in 0..row.n {
                let s = if rep == 0 { row.s } else { 1 };
                let name = rep_name(ri, row.n, rep);
                out.push(leaf(cur.depthwise(format!("{name}.dw"), 3, s, 1)?));
                out.push(leaf(cur.bn(format!("{name}.bn"))?));
                out.push(leaf(cur.act(format!("{name}.act"), nl)?));
            }
        }
        RowOp::Bottleneck => {
            let spec = BottleneckSpec {
                t: row.t.ok_or_else(|| structural("missing expansion factor".into()))?,
                c: row.c,
                n: row.n,
                s: row.s,
            };
            out.extend(bottleneck_blocks(cur, &spec, nl, &|k| format!("r{ri}.{k}"))?);
        }
        RowOp::GDConv => {
            if row.c != in_c {
                return Err(structural(format!("GDConv keeps channels, {in_c} in but c = {}", row.c)));
            }
            let [_, h, w] = cur.shape;
            let name = format!("r{ri}");
            out.push(leaf(cur.layer(format!("{name}.gdconv"), LayerKind::GDConv, in_c, (h, w), (1, 1), (0, 0))?));
            if arch.bn_linear {
                out.push(leaf(cur.bn(format!("{name}.bn"))?));
            }
        }
        RowOp::LinearConv1x1 => {
            let name = format!("r{ri}");
            out.push(leaf(cur.conv(format!("{name}.conv"), row.c, 1, 1, 0)?));
            if arch.bn_linear {
                out.push(leaf(cur.bn(format!("{name}.bn"))?));
            }
        }
        RowOp::GAPool => {
            if row.c != in_c {
                return Err(structural(format!("pooling keeps channels, {in_c} in but c = {}", row.c)));
            }
            out.push(leaf(cur.layer(format!("r{ri}.gapool"), LayerKind::GlobalAvgPool, in_c, (1, 1), (1, 1), (0, 0))?));
        }
        RowOp::Fc => {
            out.push(leaf(cur.layer(format!("r{ri}.fc"), LayerKind::Dense, row.c, (1, 1), (1, 1), (0, 0))?));
        }
    }
    Ok(out)
}

/// Expands every row. Fails with a structural error naming the offending row
/// when the chain does not compose or the output is not `1×1`.
pub(crate) fn expand(arch: &ArchSpec) -> Result<Vec<DescNode>> {
    let mut cur = Cursor {
        shape: [3, arch.input.height, arch.input.width],
        row: 0,
        seen_global: false,
    };
    let mut nodes = Vec::new();
    for (ri, row) in arch.rows.iter().enumerate() {
        nodes.extend(expand_row(&mut cur, arch, ri, row)?);
    }
    let [_, h, w] = cur.shape;
    if (h, w) != (1, 1) {
        return Err(Error::Structural(format!(
            "architecture ends at spatial {h}x{w}, expected 1x1"
        )));
    }
    Ok(nodes)
}

/// Every materialized layer with its input and output shape.
pub fn shape_propagate(arch: &ArchSpec) -> Result<Vec<LayerDesc>> {
    Ok(expand(arch)?
        .into_iter()
        .flat_map(|n| match n {
            DescNode::Layer(l) => vec![l],
            DescNode::Block { layers, .. } => layers,
        })
        .collect())
}

/// Input shape (`C, H, W`) of every row followed by the final output shape.
pub fn row_shapes(arch: &ArchSpec) -> Result<Vec<[usize; 3]>> {
    let layers = shape_propagate(arch)?;
    let mut shapes = Vec::with_capacity(arch.rows.len() + 1);
    for ri in 0..arch.rows.len() {
        let first = layers
            .iter()
            .find(|l| l.row == ri)
            .ok_or_else(|| Error::Structural(format!("row {ri} produced no layers")))?;
        shapes.push(first.input);
    }
    shapes.push(layers.last().map(|l| l.output).unwrap_or([3, arch.input.height, arch.input.width]));
    Ok(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Resolution, Variant};

    fn primary(res: Resolution) -> ArchSpec {
        ArchSpec::mobilefacenet(Variant::Primary, res).unwrap()
    }

    #[test]
    fn table_input_column() {
        let shapes = row_shapes(&primary(Resolution::R112X112)).unwrap();
        let expect = [
            [3, 112, 112],
            [64, 56, 56],
            [64, 56, 56],
            [64, 28, 28],
            [128, 14, 14],
            [128, 14, 14],
            [128, 7, 7],
            [128, 7, 7],
            [512, 7, 7],
            [512, 1, 1],
            [128, 1, 1],
        ];
        assert_eq!(shapes, expect);
    }

    #[test]
    fn rectangular_and_small_inputs() {
        let gd = |res| {
            shape_propagate(&primary(res))
                .unwrap()
                .into_iter()
                .find(|l| l.kind == LayerKind::GDConv)
                .unwrap()
        };
        let g = gd(Resolution::R112X96);
        assert_eq!((g.input[1], g.input[2]), (7, 6));
        assert_eq!(g.kernel, (7, 6));
        let g = gd(Resolution::R96X96);
        assert_eq!(g.kernel, (6, 6));
    }

    #[test]
    fn gdconv_kernel_equals_fmap_end() {
        for v in Variant::ALL {
            for r in Resolution::SUPPORTED {
                for l in shape_propagate(&ArchSpec::mobilefacenet(v, r).unwrap()).unwrap() {
                    if l.kind == LayerKind::GDConv {
                        assert_eq!(l.kernel, (l.input[1], l.input[2]));
                        assert_eq!((l.output[1], l.output[2]), (1, 1));
                    }
                }
            }
        }
    }

    #[test]
    fn third_row_blocks() {
        let spec = BottleneckSpec { t: 2, c: 64, n: 5, s: 2 };
        let blocks = expand_bottleneck_desc(&spec, 64, (56, 56), Nonlinearity::PRelu).unwrap();
        let shortcuts: Vec<bool> = blocks
            .iter()
            .map(|b| match b {
                DescNode::Block { shortcut, .. } => *shortcut,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(shortcuts, vec![false, true, true, true, true]);
        assert_eq!(blocks.last().unwrap().output(), [64, 28, 28]);
        let first = blocks[0].layers();
        assert_eq!(first[0].output[0], 128);
        assert_eq!(first[3].stride, (2, 2));
        assert_eq!(blocks[1].layers()[3].stride, (1, 1));
    }

    #[test]
    fn fifth_row_all_shortcuts() {
        let spec = BottleneckSpec { t: 2, c: 128, n: 6, s: 1 };
        let blocks = expand_bottleneck_desc(&spec, 128, (14, 14), Nonlinearity::PRelu).unwrap();
        assert!(blocks
            .iter()
            .all(|b| matches!(b, DescNode::Block { shortcut: true, .. })));
    }

    #[test]
    fn unit_expansion_keeps_width() {
        let spec = BottleneckSpec { t: 1, c: 32, n: 1, s: 1 };
        let blocks = expand_bottleneck_desc(&spec, 32, (8, 8), Nonlinearity::Relu).unwrap();
        assert_eq!(blocks[0].layers()[0].output[0], 32);
        assert!(matches!(blocks[0], DescNode::Block { shortcut: true, .. }));
    }

    #[test]
    fn bad_chain_names_row() {
        let mut a = primary(Resolution::R112X112);
        a.rows[8].c = 256;
        let err = expand(&a).unwrap_err().to_string();
        assert!(err.contains("row 8"), "{err}");
        let mut a = primary(Resolution::R112X112);
        a.rows.truncate(8);
        assert!(expand(&a).is_err());
    }

    #[test]
    fn post_global_marks() {
        let layers = shape_propagate(&primary(Resolution::R112X112)).unwrap();
        let gi = layers.iter().position(|l| l.is_global).unwrap();
        assert_eq!(layers[gi].kind, LayerKind::GDConv);
        assert!(layers[..=gi].iter().all(|l| !l.post_global));
        assert!(layers[gi + 1..].iter().all(|l| l.post_global));
        assert_eq!(layers.len() - gi - 1, 3); // bn, conv, bn
    }
}
